#include <iostream>

#include "CLI11.hpp"
#include "p4d/cli/run.hpp"

namespace fs = std::filesystem;
using namespace p4d::cli;

namespace {

struct ConfigFlags {
    std::string path;
    std::vector<std::string> sets;

    void attach(CLI::App* cmd) {
        cmd->add_option("--config", path, "Run config JSON; defaults are used when omitted")->check(CLI::ExistingFile);
        cmd->add_option("--set", sets, "Override a config field, e.g. --set training.seed=7 (repeatable)");
    }
    RunConfig load() const { return load_config(path, sets); }
};

fs::path pick(const std::string& flag, const std::string& fallback, const char* name) {
    if (!flag.empty()) return flag;
    if (!fallback.empty()) return fallback;
    throw ConfigError(name, "no path given on the command line or in the config");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Multimodal 4D panoptic segmentation: data generation, training, tracking and evaluation"};
    app.require_subcommand(1);
    app.set_version_flag("--version", kCodeVersion);

    ConfigFlags gen_cfg, train_cfg, tam_cfg, infer_cfg;
    std::string out, data, stage1, tam, scenes, pred, gt;
    std::optional<std::uint64_t> seed;
    bool baseline = false, oracle = false;
    std::vector<std::string> logs, reports;

    auto* gen = app.add_subcommand("generate", "Generate a synthetic dataset");
    gen_cfg.attach(gen);
    gen->add_option("--out", out, "Dataset directory")->required();
    gen->add_option("--seed", seed, "Overrides data.seed");

    auto* train = app.add_subcommand("train", "Stage 1: train the panoptic model");
    train_cfg.attach(train);
    train->add_option("--data", data, "Dataset directory (default: paths.dataset)");
    train->add_option("--out", out, "Output directory for stage1.bin/.idx and train_log.csv")->required();

    auto* train_tam = app.add_subcommand("train-tam", "Stage 2: train the tracklet association module");
    tam_cfg.attach(train_tam);
    train_tam->add_option("--data", data, "Dataset directory (default: paths.dataset)");
    train_tam->add_option("--stage1", stage1, "Stage-1 checkpoint base or directory (default: paths.stage1)");
    train_tam->add_option("--out", out, "Output directory for tam.bin/.idx and tam_log.csv")->required();

    auto* infer = app.add_subcommand("infer", "Segment and track scenes");
    infer_cfg.attach(infer);
    infer->add_option("--stage1", stage1, "Stage-1 checkpoint base or directory (default: paths.stage1)");
    infer->add_option("--tam", tam, "TAM checkpoint base or directory (default: paths.tam)");
    infer->add_option("--scenes", scenes, "Scene or dataset directory (default: paths.dataset)");
    infer->add_option("--out", out, "Prediction directory")->required();
    infer->add_flag("--baseline-iou", baseline, "Associate by mask IoU instead of the TAM");

    auto* eval = app.add_subcommand("eval", "Evaluate predictions against ground truth");
    eval->add_option("--pred", pred, "Prediction directory")->required();
    eval->add_option("--gt", gt, "Scene or dataset directory with labels")->required();
    eval->add_option("--out", out, "Directory for report.json and report.csv")->required();
    eval->add_flag("--oracle", oracle, "Cross-check small scenes against the brute-force evaluator");

    auto* report = app.add_subcommand("report", "Plot logs and reports and write a summary");
    report->add_option("--log", logs, "Training log CSV (repeatable)");
    report->add_option("--report", reports, "report.json from eval (repeatable)");
    report->add_option("--out", out, "Output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? kOk : kConfig;
    }

    return run_guarded([&] {
        if (gen->parsed()) {
            auto cfg = gen_cfg.load();
            if (seed) cfg.data.seed = *seed;
            cmd_generate(cfg, out);
            std::cout << "wrote " << cfg.data.scenes << " scenes to " << out << '\n';
        } else if (train->parsed()) {
            const auto cfg = train_cfg.load();
            cmd_train(cfg, pick(data, cfg.paths.dataset, "paths.dataset"), out);
            std::cout << "stage-1 checkpoint written to " << fs::path(out) / "stage1" << '\n';
        } else if (train_tam->parsed()) {
            const auto cfg = tam_cfg.load();
            cmd_train_tam(cfg, pick(data, cfg.paths.dataset, "paths.dataset"),
                          pick(stage1, cfg.paths.stage1, "paths.stage1"), out);
            std::cout << "TAM checkpoint written to " << fs::path(out) / "tam" << '\n';
        } else if (infer->parsed()) {
            const auto cfg = infer_cfg.load();
            const fs::path tam_path = baseline ? fs::path() : pick(tam, cfg.paths.tam, "paths.tam");
            cmd_infer(cfg, pick(stage1, cfg.paths.stage1, "paths.stage1"), tam_path,
                      pick(scenes, cfg.paths.dataset, "paths.dataset"), out, baseline);
            std::cout << "predictions written to " << out << '\n';
        } else if (eval->parsed()) {
            const auto res = cmd_eval(pred, gt, out, oracle);
            std::cout << p4d::metrics::MetricReport::csv_header() << '\n' << res.report.csv_row() << '\n';
            if (res.oracle_discrepancy && *res.oracle_discrepancy > 1e-9)
                throw std::runtime_error("oracle disagrees with the evaluator by " +
                                         std::to_string(*res.oracle_discrepancy));
        } else if (report->parsed()) {
            cmd_report({logs.begin(), logs.end()}, {reports.begin(), reports.end()}, out);
            std::cout << "summary written to " << fs::path(out) / "summary.md" << '\n';
        }
    });
}
