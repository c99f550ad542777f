// SPDX-License-Identifier: Apache-2.0
// mhim: command-line front end for data generation, training, evaluation and export.

#include <atomic>
#include <cstdlib>
#include <iostream>
#include <mutex>
#include <sstream>
#include <thread>

#include <CLI11.hpp>

#include "mhim/experiment.hpp"

namespace fs = std::filesystem;
using namespace mhim;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;

struct CommonArgs {
    std::string config;
    std::vector<std::string> sets;
    std::string out;
};

void add_common(CLI::App* cmd, CommonArgs& args, bool config_required = true) {
    auto* opt = cmd->add_option("--config", args.config, "Experiment config file (key = value lines)");
    if (config_required) opt->required();
    cmd->add_option("--set", args.sets, "Override a config key, key=value (repeatable)");
    cmd->add_option("--out", args.out, "Output directory")->required();
}

ExperimentConfig config_from(const CommonArgs& args) {
    return load_config(args.config, args.sets, std::getenv("MHIM_SEED"));
}

// Maps an exception to the documented exit codes.
int report(const std::exception& e) {
    std::cerr << "mhim: " << e.what() << '\n';
    if (dynamic_cast<const ConfigError*>(&e)) return kExitConfig;
    if (dynamic_cast<const NumericError*>(&e)) return kExitNumeric;
    return kExitFailure;
}

void print_summary(const RunSummary& s) {
    std::cout << "auc " << s.aggregate.auc.mean << " +- " << s.aggregate.auc.std << "  accuracy "
              << s.aggregate.accuracy.mean << "  f1 " << s.aggregate.f1.mean << '\n';
}

int gen_data(const CommonArgs& args) {
    const ExperimentConfig c = config_from(args);
    if (c.dataset_kind != "synthetic") throw ConfigError("gen-data needs dataset.kind = synthetic");
    const SyntheticDataset ds = generate(c.synthetic, c.seed);
    save_dataset(args.out, ds.bags);
    std::ostringstream planted;
    planted << "bag_id,instance_idx,planted_positive\n";
    for (const PlantedLabels& p : ds.planted)
        for (std::size_t i = 0; i < p.positive.size(); ++i)
            planted << p.bag_id << ',' << i << ',' << int(p.positive[i]) << '\n';
    io::write_file_atomic(fs::path(args.out) / "planted.csv", planted.str());
    io::write_file_atomic(fs::path(args.out) / "config.resolved.txt", resolved_config_text(c));
    std::cout << "wrote " << ds.bags.size() << " bags to " << args.out << '\n';
    return kExitOk;
}

int pretrain(const CommonArgs& args) {
    const ExperimentConfig c = config_from(args);
    const ExperimentData data = load_data(c);
    TrainConfig tc = train_config_for(c, data);
    tc.epochs = c.resolved_pretrain_epochs();
    const fs::path out = args.out;
    io::write_file_atomic(out / "config.resolved.txt", resolved_config_text(c));
    BaselineFitResult r = pretrain_baseline(data.bags, tc);
    io::write_file_atomic(out / "history.csv", history_csv(r.history));
    io::write_file_atomic(out / "pretrained.params", encode_parameters(snapshot(r.model.parameters())));
    std::cout << "wrote " << (out / "pretrained.params").string() << '\n';
    return kExitOk;
}

int train(const CommonArgs& args) {
    print_summary(run(config_from(args), args.out));
    return kExitOk;
}

int eval(const CommonArgs& args, const std::string& run_dir) {
    std::optional<ExperimentConfig> dataset;
    if (!args.config.empty()) dataset = config_from(args);
    print_summary(evaluate_run(run_dir, args.out, dataset));
    return kExitOk;
}

int export_map(const std::string& run_dir, const std::string& bag, int fold, const std::string& out) {
    std::optional<std::size_t> f;
    if (fold >= 0) f = static_cast<std::size_t>(fold);
    const fs::path path = fs::path(out) / ("scoremap_" + bag + ".csv");
    io::write_file_atomic(path, export_scoremap(run_dir, bag, f));
    std::cout << "wrote " << path.string() << '\n';
    return kExitOk;
}

int sweep(const CommonArgs& args, const std::vector<std::string>& grid, std::size_t jobs) {
    std::vector<Assignment> base;
    base = parse_config_text(io::read_file(args.config), args.config);
    if (const char* env = std::getenv("MHIM_SEED"); env && *env) base.push_back({"seed", env, "MHIM_SEED"});
    for (const std::string& s : args.sets) base.push_back(parse_override(s));

    std::vector<GridAxis> axes;
    for (const std::string& g : grid) axes.push_back(parse_grid_axis(g));
    const auto points = expand_grid(axes);

    // Validate every point up front so a typo fails before any compute.
    std::vector<ExperimentConfig> configs;
    for (const auto& point : points) {
        auto all = base;
        all.insert(all.end(), point.begin(), point.end());
        configs.push_back(resolve_config(all));
    }

    struct Outcome {
        std::string status = "ok";
        RunSummary summary;
        int code = kExitOk;
    };
    std::vector<Outcome> outcomes(points.size());
    std::atomic<std::size_t> next{0};
    std::mutex log;
    auto worker = [&] {
        for (std::size_t i = next++; i < points.size(); i = next++) {
            const fs::path dir = fs::path(args.out) / grid_point_name(points[i]);
            try {
                outcomes[i].summary = run(configs[i], dir);
            } catch (const std::exception& e) {
                outcomes[i].status = e.what();
                outcomes[i].code = report(e);
            }
            std::lock_guard lock(log);
            std::cout << grid_point_name(points[i]) << ": "
                      << (outcomes[i].code == kExitOk ? "ok" : "failed") << '\n';
        }
    };
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < std::max<std::size_t>(1, jobs); ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();

    std::ostringstream csv;
    csv.precision(17);
    csv << "point";
    for (const GridAxis& a : axes) csv << ',' << a.key;
    csv << ",auc_mean,auc_std,accuracy_mean,f1_mean,status\n";
    int code = kExitOk;
    for (std::size_t i = 0; i < points.size(); ++i) {
        csv << grid_point_name(points[i]);
        for (const Assignment& a : points[i]) csv << ',' << a.value;
        const auto& agg = outcomes[i].summary.aggregate;
        if (outcomes[i].code == kExitOk)
            csv << ',' << agg.auc.mean << ',' << agg.auc.std << ',' << agg.accuracy.mean << ',' << agg.f1.mean << ",ok\n";
        else
            csv << ",,,,,failed\n";
        if (code == kExitOk) code = outcomes[i].code;
    }
    io::write_file_atomic(fs::path(args.out) / "sweep.csv", csv.str());
    return code;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Masked hard instance mining for multiple instance learning"};
    app.require_subcommand(1);

    CommonArgs gen_args, pre_args, train_args, eval_args, sweep_args;
    add_common(app.add_subcommand("gen-data", "Generate a synthetic dataset as BAGF files plus manifest"), gen_args);
    add_common(app.add_subcommand("pretrain", "Train the baseline aggregator on the whole dataset"), pre_args);
    add_common(app.add_subcommand("train", "Cross-validated training run"), train_args);

    auto* eval_cmd = app.add_subcommand("eval", "Re-score the students of a finished run");
    std::string eval_run;
    add_common(eval_cmd, eval_args, false);
    eval_cmd->add_option("--run", eval_run, "Run directory written by train")->required();

    auto* export_cmd = app.add_subcommand("export", "Write a per-instance score map for one bag");
    std::string export_run, export_bag, export_out;
    int export_fold = -1;
    export_cmd->add_option("--run", export_run, "Run directory written by train")->required();
    export_cmd->add_option("--bag", export_bag, "Bag id")->required();
    export_cmd->add_option("--fold", export_fold, "Fold whose student to use (default: first that trained on the bag)");
    export_cmd->add_option("--out", export_out, "Output directory")->required();

    auto* sweep_cmd = app.add_subcommand("sweep", "Cartesian grid of train runs");
    std::vector<std::string> grid;
    std::size_t jobs = 1;
    add_common(sweep_cmd, sweep_args);
    sweep_cmd->add_option("--grid", grid, "key=v1,v2,... (repeatable)")->required();
    sweep_cmd->add_option("--jobs", jobs, "Parallel runs")->check(CLI::PositiveNumber);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitConfig;
    }

    try {
        if (app.got_subcommand("gen-data")) return gen_data(gen_args);
        if (app.got_subcommand("pretrain")) return pretrain(pre_args);
        if (app.got_subcommand("train")) return train(train_args);
        if (app.got_subcommand("eval")) return eval(eval_args, eval_run);
        if (app.got_subcommand("export")) return export_map(export_run, export_bag, export_fold, export_out);
        if (app.got_subcommand("sweep")) return sweep(sweep_args, grid, jobs);
    } catch (const std::exception& e) {
        return report(e);
    }
    return kExitFailure;
}
