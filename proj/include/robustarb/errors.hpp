#pragma once

#include <stdexcept>
#include <string>

namespace robustarb {

// Invalid model/solver/runner parameters. The CLI maps this to exit status 1.
class ConfigError : public std::invalid_argument {
public:
    explicit ConfigError(const std::string& what) : std::invalid_argument(what) {}
};

// A state outside the open positive orthant.
class DomainError : public std::domain_error {
public:
    explicit DomainError(const std::string& what) : std::domain_error(what) {}
};

// Caller misuse: empty grids, boundary nodes passed to interior stencils, etc.
class UsageError : public std::invalid_argument {
public:
    explicit UsageError(const std::string& what) : std::invalid_argument(what) {}
};

// Non-finite coefficients or rule values during a simulation. `state` carries
// a human-readable dump of the offending path state.
class SimulationError : public std::runtime_error {
public:
    SimulationError(const std::string& what, std::string state)
        : std::runtime_error(what), state_(std::move(state)) {}

    const std::string& state() const noexcept { return state_; }

private:
    std::string state_;
};

// Explicit-step stability bound violated at some node.
class CflError : public std::runtime_error {
public:
    explicit CflError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace robustarb
