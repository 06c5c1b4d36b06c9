// robustarb: batch runner for the engines.
//
//   robustarb <simulate|estimate|solve|hedge|check|run> --config FILE --out DIR
//             [--seed N] [--workers N] [--tolerance-profile strict|default]
//   robustarb reproduce --manifest FILE [--out DIR] [--seed N] [--workers N]
//
// Exit status: 0 success, 1 configuration error, 2 diagnostic outside
// tolerance or artifact digest mismatch.

#include <CLI11.hpp>

#include <iostream>

#include "robustarb/runner.hpp"

int main(int argc, char** argv) {
    CLI::App app{"Robust relative arbitrage: Monte-Carlo, HJB solver, hedging backtests"};
    app.require_subcommand(1);

    robustarb::CliOptions opt;
    std::uint64_t seed = 0;
    std::size_t workers = 1;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--out", opt.out, "output directory")->required(sub->get_name() != "reproduce");
        sub->add_option("--seed", seed, "root seed (overrides the config)");
        sub->add_option("--workers", workers, "worker threads (outputs do not depend on it)")
            ->check(CLI::PositiveNumber);
    };

    for (const char* name : {"simulate", "estimate", "solve", "hedge", "check", "run"}) {
        auto* sub = app.add_subcommand(name, std::string(name) == "run" ? "run the command named in the config"
                                                                         : std::string("run '") + name + "'");
        sub->add_option("--config", opt.config, "JSON configuration")->required()->check(CLI::ExistingFile);
        sub->add_option("--tolerance-profile", opt.tolerance_profile, "strict or default")
            ->check(CLI::IsMember({"strict", "default"}));
        add_common(sub);
    }
    auto* rep = app.add_subcommand("reproduce", "re-run a recorded manifest and byte-compare its artifacts");
    rep->add_option("--manifest,--config", opt.config, "manifest.json written by a previous run")
        ->required()
        ->check(CLI::ExistingFile);
    add_common(rep);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : robustarb::exit_code::config;
    }

    CLI::App* sub = app.get_subcommands().front();
    opt.command = sub->get_name();
    if (sub->count("--seed")) opt.seed = seed;
    if (sub->count("--workers")) opt.workers = workers;

    const auto result = opt.command == "reproduce" ? robustarb::reproduce(opt) : robustarb::run(opt);
    if (result.exit == robustarb::exit_code::ok) {
        std::cout << opt.command << ": ok";
        if (!result.message.empty()) std::cout << " (" << result.message << ")";
        std::cout << "\n";
        for (const auto& a : result.artifacts) std::cout << "  " << a << "\n";
    } else {
        std::cerr << opt.command << ": " << result.message << "\n";
        if (result.summary.contains("differences"))
            for (const auto& d : result.summary["differences"]) std::cerr << "  " << d.dump() << "\n";
    }
    return result.exit;
}
