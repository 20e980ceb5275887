// wqtrust command line: run, synth, validate-config, report.

#include "wqtrust/harness.hpp"

#include "CLI11.hpp"

#include <cstdlib>
#include <iostream>

namespace {

namespace h = wqt::harness;

constexpr int kOk = 0;
constexpr int kConfigFailure = 2;
constexpr int kStageFailure = 3;

struct Flags {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> jobs;
    std::optional<std::string> out;
    std::vector<std::string> formats;
};

void add_common(CLI::App* cmd, Flags& f, bool with_run_flags) {
    cmd->add_option("--config", f.config, "YAML experiment config")->required()->check(CLI::ExistingFile);
    cmd->add_option("--seed", f.seed, "master seed (overrides the config)");
    cmd->add_option("--out", f.out, "output directory (overrides WQTRUST_OUT and the config)");
    if (with_run_flags) {
        cmd->add_option("--jobs", f.jobs, "parallel jobs")->check(CLI::PositiveNumber);
        cmd->add_option("--formats", f.formats, "json,csv")->delimiter(',');
    }
}

h::ExperimentConfig configure(const Flags& f) {
    auto cfg = h::load_config(f.config);
    h::Overrides o;
    o.seed = f.seed;
    o.jobs = f.jobs;
    if (f.out) o.output = *f.out;
    if (!f.formats.empty()) o.formats = f.formats;
    h::apply_overrides(cfg, o, std::getenv("WQTRUST_OUT"));
    h::validate(cfg);
    return cfg;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Trustworthiness benchmark for water-quality deep learning models"};
    app.require_subcommand(1);

    Flags run_f, synth_f, check_f;
    auto* run = app.add_subcommand("run", "run the full pipeline and write the report");
    add_common(run, run_f, true);
    auto* synth = app.add_subcommand("synth", "write the configured synthetic corpus as CSV");
    add_common(synth, synth_f, false);
    auto* check = app.add_subcommand("validate-config", "parse and check a config, print its hash");
    check->add_option("--config", check_f.config, "YAML experiment config")->required()->check(CLI::ExistingFile);
    check->add_option("--seed", check_f.seed, "master seed (overrides the config)");

    std::string input, report_out;
    std::vector<std::string> report_formats{"csv"};
    auto* report = app.add_subcommand("report", "re-render CSV files from a report.json");
    report->add_option("--input", input, "report.json")->required()->check(CLI::ExistingFile);
    report->add_option("--out", report_out, "output directory (default: next to the input)");
    report->add_option("--formats", report_formats, "json,csv")->delimiter(',');

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kConfigFailure;
    }

    try {
        if (*run) {
            const auto cfg = configure(run_f);
            std::cerr << "config " << h::config_hash(cfg) << " seed " << *cfg.seed << " -> " << cfg.output.string()
                      << "\n";
            const auto outcome = h::run(cfg);
            h::emit(outcome.report, cfg.output, cfg.formats);
            if (!outcome.ok()) {
                std::cerr << outcome.failure->what() << "\n";
                return kStageFailure;
            }
            return kOk;
        }
        if (*synth) {
            const auto cfg = configure(synth_f);
            wqt::data::write_csv(h::load_dataset(cfg), cfg.output);
            return kOk;
        }
        if (*check) {
            auto cfg = h::load_config(check_f.config);
            if (check_f.seed) cfg.seed = check_f.seed;
            h::validate(cfg);
            std::cout << h::config_hash(cfg) << "\n";
            return kOk;
        }
        if (*report) {
            const std::filesystem::path in(input);
            const auto dir = report_out.empty() ? in.parent_path() : std::filesystem::path(report_out);
            h::emit(h::read_report(in), dir, report_formats);
            return kOk;
        }
    } catch (const wqt::ConfigError& e) {
        std::cerr << e.what() << "\n";
        return kConfigFailure;
    } catch (const std::exception& e) {
        std::cerr << e.what() << "\n";
        return kStageFailure;
    }
    return kOk;
}
