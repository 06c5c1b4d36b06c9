#pragma once

// Small closed-form expression evaluator used for user-declared leverage
// functions G(y) in model configuration files.
//
// Grammar:
//   expr   := term (('+' | '-') term)*
//   term   := unary (('*' | '/') unary)*
//   unary  := ('-' | '+') unary | power
//   power  := atom ('^' unary)?
//   atom   := number | name | name '(' expr (',' expr)* ')' | '(' expr ')'
//
// Variables: y1..yn (capitalizations), mu1..mun (market weights), norm1 (sum
// of the y_i), n (dimension).

#include <cctype>
#include <cmath>
#include <cstdlib>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "robustarb/errors.hpp"

namespace robustarb {

class Expression {
public:
    Expression() = default;

    static Expression parse(std::string_view text) {
        Parser p{text, 0};
        Expression e;
        e.source_ = std::string(text);
        e.root_ = p.parse_expr();
        p.skip_ws();
        if (p.pos != text.size()) {
            throw ConfigError("expression: unexpected '" + std::string(text.substr(p.pos, 1)) +
                              "' at offset " + std::to_string(p.pos) + " in \"" + e.source_ + "\"");
        }
        return e;
    }

    double operator()(std::span<const double> y) const {
        if (!root_) throw UsageError("expression: evaluating an empty expression");
        double norm1 = 0.0;
        for (double v : y) norm1 += v;
        Env env{y, norm1};
        return root_->eval(env);
    }

    const std::string& source() const { return source_; }

private:
    struct Env {
        std::span<const double> y;
        double norm1;
    };

    struct Node {
        virtual ~Node() = default;
        virtual double eval(const Env& env) const = 0;
    };
    using NodePtr = std::shared_ptr<const Node>;

    struct Number final : Node {
        double value;
        explicit Number(double v) : value(v) {}
        double eval(const Env&) const override { return value; }
    };

    struct Variable final : Node {
        enum class Kind { Cap, Weight, Norm, Dim } kind;
        std::size_t index;
        Variable(Kind k, std::size_t i) : kind(k), index(i) {}
        double eval(const Env& env) const override {
            switch (kind) {
                case Kind::Norm: return env.norm1;
                case Kind::Dim: return static_cast<double>(env.y.size());
                case Kind::Cap:
                case Kind::Weight:
                    if (index >= env.y.size()) {
                        throw UsageError("expression: variable index " + std::to_string(index + 1) +
                                         " exceeds dimension " + std::to_string(env.y.size()));
                    }
                    return kind == Kind::Cap ? env.y[index] : env.y[index] / env.norm1;
            }
            return 0.0;
        }
    };

    struct Binary final : Node {
        char op;
        NodePtr lhs, rhs;
        Binary(char o, NodePtr l, NodePtr r) : op(o), lhs(std::move(l)), rhs(std::move(r)) {}
        double eval(const Env& env) const override {
            const double a = lhs->eval(env);
            const double b = rhs->eval(env);
            switch (op) {
                case '+': return a + b;
                case '-': return a - b;
                case '*': return a * b;
                case '/': return a / b;
                case '^': return std::pow(a, b);
            }
            return 0.0;
        }
    };

    struct Negate final : Node {
        NodePtr arg;
        explicit Negate(NodePtr a) : arg(std::move(a)) {}
        double eval(const Env& env) const override { return -arg->eval(env); }
    };

    struct Call final : Node {
        std::string name;
        std::vector<NodePtr> args;
        double eval(const Env& env) const override {
            const double a = args[0]->eval(env);
            if (name == "exp") return std::exp(a);
            if (name == "log") return std::log(a);
            if (name == "sqrt") return std::sqrt(a);
            if (name == "abs") return std::fabs(a);
            if (name == "tanh") return std::tanh(a);
            if (name == "sin") return std::sin(a);
            if (name == "cos") return std::cos(a);
            const double b = args[1]->eval(env);
            if (name == "min") return std::fmin(a, b);
            if (name == "max") return std::fmax(a, b);
            return std::pow(a, b);  // pow
        }
    };

    struct Parser {
        std::string_view s;
        std::size_t pos;

        void skip_ws() {
            while (pos < s.size() && std::isspace(static_cast<unsigned char>(s[pos]))) ++pos;
        }
        bool accept(char c) {
            skip_ws();
            if (pos < s.size() && s[pos] == c) {
                ++pos;
                return true;
            }
            return false;
        }
        [[noreturn]] void fail(const std::string& msg) const {
            throw ConfigError("expression: " + msg + " at offset " + std::to_string(pos) + " in \"" +
                              std::string(s) + "\"");
        }

        NodePtr parse_expr() {
            NodePtr lhs = parse_term();
            for (;;) {
                if (accept('+')) lhs = std::make_shared<Binary>('+', lhs, parse_term());
                else if (accept('-')) lhs = std::make_shared<Binary>('-', lhs, parse_term());
                else return lhs;
            }
        }
        NodePtr parse_term() {
            NodePtr lhs = parse_unary();
            for (;;) {
                if (accept('*')) lhs = std::make_shared<Binary>('*', lhs, parse_unary());
                else if (accept('/')) lhs = std::make_shared<Binary>('/', lhs, parse_unary());
                else return lhs;
            }
        }
        NodePtr parse_unary() {
            if (accept('-')) return std::make_shared<Negate>(parse_unary());
            if (accept('+')) return parse_unary();
            return parse_power();
        }
        NodePtr parse_power() {
            NodePtr base = parse_atom();
            if (accept('^')) return std::make_shared<Binary>('^', base, parse_unary());
            return base;
        }
        NodePtr parse_atom() {
            skip_ws();
            if (pos >= s.size()) fail("unexpected end of input");
            if (accept('(')) {
                NodePtr inner = parse_expr();
                if (!accept(')')) fail("expected ')'");
                return inner;
            }
            const char c = s[pos];
            if (std::isdigit(static_cast<unsigned char>(c)) || c == '.') return parse_number();
            if (std::isalpha(static_cast<unsigned char>(c))) return parse_name();
            fail(std::string("unexpected '") + c + "'");
        }
        NodePtr parse_number() {
            const std::string tail(s.substr(pos));
            char* end = nullptr;
            const double v = std::strtod(tail.c_str(), &end);
            if (end == tail.c_str()) fail("malformed number");
            pos += static_cast<std::size_t>(end - tail.c_str());
            return std::make_shared<Number>(v);
        }
        NodePtr parse_name() {
            const std::size_t start = pos;
            while (pos < s.size() && std::isalnum(static_cast<unsigned char>(s[pos]))) ++pos;
            const std::string name(s.substr(start, pos - start));
            if (accept('(')) {
                static const std::vector<std::string> unary{"exp", "log", "sqrt", "abs", "tanh", "sin", "cos"};
                static const std::vector<std::string> binary{"min", "max", "pow"};
                auto call = std::make_shared<Call>();
                call->name = name;
                call->args.push_back(parse_expr());
                while (accept(',')) call->args.push_back(parse_expr());
                if (!accept(')')) fail("expected ')' after arguments of " + name);
                std::size_t want = 0;
                for (const auto& u : unary) if (u == name) want = 1;
                for (const auto& b : binary) if (b == name) want = 2;
                if (want == 0) fail("unknown function '" + name + "'");
                if (call->args.size() != want) fail("wrong argument count for " + name);
                return call;
            }
            if (name == "norm1") return std::make_shared<Variable>(Variable::Kind::Norm, 0);
            if (name == "n") return std::make_shared<Variable>(Variable::Kind::Dim, 0);
            auto indexed = [&](std::string_view prefix, Variable::Kind kind) -> NodePtr {
                if (name.size() <= prefix.size() || name.compare(0, prefix.size(), prefix) != 0) return nullptr;
                const std::string digits = name.substr(prefix.size());
                for (char d : digits) if (!std::isdigit(static_cast<unsigned char>(d))) return nullptr;
                const long idx = std::strtol(digits.c_str(), nullptr, 10);
                if (idx < 1) fail("variable indices start at 1");
                return std::make_shared<Variable>(kind, static_cast<std::size_t>(idx - 1));
            };
            if (auto v = indexed("mu", Variable::Kind::Weight)) return v;
            if (auto v = indexed("y", Variable::Kind::Cap)) return v;
            fail("unknown variable '" + name + "'");
        }
    };

    std::string source_;
    NodePtr root_;
};

}  // namespace robustarb
