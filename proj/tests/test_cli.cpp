#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "mhim/experiment.hpp"

using namespace mhim;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
    fs::path p = fs::temp_directory_path() / ("mhim_test_cli_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::vector<Assignment> tiny_assignments() {
    return parse_config_text(
        "synthetic.n_bags = 16\n"
        "synthetic.min_instances = 12\n"
        "synthetic.max_instances = 30\n"
        "synthetic.input_dim = 6\n"
        "model.hidden_dim = 8\n"
        "model.attention_dim = 4\n"
        "grn.queries = 3\n"
        "grn.heads = 2\n"
        "optim.epochs = 3\n"
        "optim.lr = 5e-3\n"
        "folds = 2\n"
        "seed = 5\n",
        "tiny");
}

ExperimentConfig tiny(std::vector<std::string> sets = {}) {
    auto a = tiny_assignments();
    for (const auto& s : sets) a.push_back(parse_override(s));
    return resolve_config(a);
}

std::string slurp(const fs::path& p) { return io::read_file(p); }

std::vector<std::vector<std::string>> csv_rows(const std::string& text) {
    std::vector<std::vector<std::string>> rows;
    std::istringstream in(text);
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
        std::vector<std::string> cells;
        std::istringstream f(line);
        std::string c;
        while (std::getline(f, c, ',')) cells.push_back(c);
        if (!line.empty() && line.back() == ',') cells.emplace_back();
        rows.push_back(cells);
    }
    return rows;
}

int run_cli(const std::string& args) {
    const std::string cmd = std::string(MHIM_CLI_PATH) + " " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

// --- config ----------------------------------------------------------------------

TEST(Config, ParsesCommentsAndWhitespace) {
    const auto a = parse_config_text("# header\n\n  loss.alpha =  0.25 # trailing\nseed=3\n", "f");
    ASSERT_EQ(a.size(), 2u);
    EXPECT_EQ(a[0].key, "loss.alpha");
    EXPECT_EQ(a[0].value, "0.25");
    EXPECT_EQ(a[0].origin, "f:3");
    const auto c = resolve_config(a);
    EXPECT_EQ(c.train.alpha, 0.25);
    EXPECT_EQ(c.seed, 3u);
    EXPECT_EQ(c.train.seed, 3u);
}

TEST(Config, UnknownKeysAreRejected) {
    try {
        resolve_config(parse_config_text("loss.alpha = 0.5\nloss.beta = 1\n", "f"));
        FAIL() << "expected ConfigError";
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("loss.beta"), std::string::npos);
        EXPECT_NE(std::string(e.what()).find("f:2"), std::string::npos);
    }
    EXPECT_THROW(parse_config_text("no equals sign\n", "f"), ConfigError);
}

TEST(Config, TypedValuesAreValidated) {
    for (const char* bad : {"optim.epochs=-1", "optim.epochs=2.5", "optim.lr=fast", "optim.lr=inf",
                            "mining.decay=yes", "model.family=lstm", "mining.strategy=rand",
                            "mining.high_ratio=0.7", "loss.tau=0", "folds=1"}) {
        EXPECT_THROW(tiny({bad}), ConfigError) << bad;
    }
    EXPECT_NO_THROW(tiny({"model.heads=3"}));  // heads only constrain the msa family
    EXPECT_THROW(tiny({"model.family=msa", "model.heads=3"}), ConfigError);
}

TEST(Config, PrecedenceFileThenEnvThenFlags) {
    const auto dir = scratch_dir("precedence");
    {
        std::ofstream f(dir / "c.txt");
        f << "seed = 1\nloss.alpha = 0.1\n";
    }
    EXPECT_EQ(load_config(dir / "c.txt").seed, 1u);
    EXPECT_EQ(load_config(dir / "c.txt", {}, "9").seed, 9u);
    EXPECT_EQ(load_config(dir / "c.txt", {"seed=4"}, "9").seed, 4u);
    EXPECT_EQ(load_config(dir / "c.txt", {"loss.alpha=0.7"}).train.alpha, 0.7);
    EXPECT_THROW(load_config(dir / "missing.txt"), ConfigError);
}

TEST(Config, PresetsApplyBeforeExplicitKeys) {
    const auto base = resolve_config(parse_config_text("loss.alpha = 0.3\nframework = baseline\n", "f"));
    EXPECT_EQ(base.framework, Framework::baseline);
    EXPECT_EQ(base.train.alpha, 0.3);  // explicit key wins regardless of line order
    EXPECT_EQ(base.train.queries, 0u);
    EXPECT_EQ(base.train.high_ratio, 0.0);

    const auto v1 = resolve_config(parse_config_text("framework = mhim_v1_attention\n", "f"));
    EXPECT_EQ(v1.train.source, ScoreSource::attention);
    EXPECT_EQ(v1.train.low_ratio, 0.0);
    EXPECT_EQ(v1.train.queries, 0u);

    const auto v2 = resolve_config({});
    EXPECT_EQ(v2.train.source, ScoreSource::instance_probability);
    EXPECT_EQ(v2.train.queries, 16u);
    EXPECT_EQ(v2.folds, 5u);
}

TEST(Config, ResolvedSnapshotIsAFixedPoint) {
    const auto c = tiny({"loss.tau=0.1", "optim.weight_decay=1e-5", "pretrain.epochs=2"});
    const std::string text = resolved_config_text(c);
    const auto again = resolve_config(parse_config_text(text, "resolved"));
    EXPECT_EQ(resolved_config_text(again), text);
    EXPECT_EQ(again.train.tau, 0.1);
    EXPECT_EQ(again.resolved_pretrain_epochs(), 2u);
}

TEST(Grid, CartesianExpansionAndNames) {
    const auto pts = expand_grid({parse_grid_axis("loss.alpha=0,0.5"), parse_grid_axis("mining.low_ratio=0.5,0.7,0.9")});
    ASSERT_EQ(pts.size(), 6u);
    EXPECT_EQ(grid_point_name(pts[0]), "loss.alpha=0_mining.low_ratio=0.5");
    EXPECT_EQ(grid_point_name(pts[5]), "loss.alpha=0.5_mining.low_ratio=0.9");
    EXPECT_THROW(parse_grid_axis("nope=1,2"), ConfigError);
    EXPECT_THROW(parse_grid_axis("loss.alpha"), ConfigError);
}

// --- runs ------------------------------------------------------------------------

TEST(Run, WritesTheDocumentedLayout) {
    const auto out = scratch_dir("layout");
    const auto summary = run(tiny(), out);
    EXPECT_EQ(summary.folds.size(), 2u);
    for (const char* f : {"config.resolved.txt", "metrics.json"}) EXPECT_TRUE(fs::exists(out / f)) << f;
    for (int k = 0; k < 2; ++k) {
        const fs::path d = out / ("fold_" + std::to_string(k));
        for (const char* f : {"history.csv", "mask_plan.csv", "student.params", "teacher.params", "metrics.json"})
            EXPECT_TRUE(fs::exists(d / f)) << d / f;
    }
    for (const auto& e : fs::recursive_directory_iterator(out)) EXPECT_NE(e.path().extension(), ".tmp");
    const auto j = nlohmann::json::parse(slurp(out / "metrics.json"));
    EXPECT_EQ(j["folds"].size(), 2u);
    EXPECT_DOUBLE_EQ(j["auc"]["mean"].get<double>(), summary.aggregate.auc.mean);
}

TEST(Run, BaselineEqualsReducedFramework) {
    const auto a = run(tiny({"framework=baseline"}), scratch_dir("reduce_a"));
    const auto b = run(tiny({"mining.high_ratio=0", "mining.low_ratio=0", "grn.queries=0", "loss.alpha=0",
                             "optim.teacher_momentum=1", "init.mode=scratch"}),
                       scratch_dir("reduce_b"));
    EXPECT_LE(std::abs(a.aggregate.auc.mean - b.aggregate.auc.mean), 1e-12);
    for (std::size_t f = 0; f < a.folds.size(); ++f) EXPECT_LE(std::abs(a.folds[f].auc - b.folds[f].auc), 1e-12);
}

TEST(Run, RerunIsBitwiseIdentical) {
    const auto c = tiny();
    const auto a = scratch_dir("rerun_a"), b = scratch_dir("rerun_b"), r = scratch_dir("rerun_resolved");
    run(c, a);
    run(c, b);
    // The snapshot alone reproduces the run too.
    run(load_run_config(a), r);
    for (const fs::path& other : {b, r}) {
        for (const auto& e : fs::recursive_directory_iterator(a)) {
            if (!e.is_regular_file()) continue;
            const auto rel = fs::relative(e.path(), a);
            EXPECT_EQ(slurp(e.path()), slurp(other / rel)) << rel;
        }
    }
}

TEST(Run, SeedChangesResults) {
    const auto a = scratch_dir("seed_a"), b = scratch_dir("seed_b");
    run(tiny(), a);
    run(tiny({"seed=6"}), b);
    EXPECT_NE(slurp(a / "fold_0" / "student.params"), slurp(b / "fold_0" / "student.params"));
}

TEST(Run, InfeasibleFoldCountIsAConfigError) {
    EXPECT_THROW(run(tiny({"folds=12"}), scratch_dir("folds")), ConfigError);
}

TEST(Run, ManifestDatasetsTrainLikeSynthetic) {
    const auto data = scratch_dir("manifest_data");
    const auto c = tiny();
    save_dataset(data, generate(c.synthetic, c.seed).bags);
    const auto out = scratch_dir("manifest_run");
    const auto s = run(tiny({"dataset.kind=manifest", "dataset.manifest=" + (data / "manifest.csv").string()}), out);
    const auto ref = run(c, scratch_dir("manifest_ref"));
    // BAGF stores float32, so results are close rather than identical.
    EXPECT_EQ(s.folds.size(), ref.folds.size());
}

TEST(Eval, ReproducesHeldOutMetrics) {
    const auto out = scratch_dir("eval_run");
    const auto s = run(tiny(), out);
    const auto e = evaluate_run(out, scratch_dir("eval_out"));
    for (std::size_t f = 0; f < s.folds.size(); ++f) EXPECT_EQ(e.folds[f].auc, s.folds[f].auc);
    EXPECT_THROW(evaluate_run(scratch_dir("eval_missing"), scratch_dir("eval_o2")), LoadError);
}

// --- export ----------------------------------------------------------------------

TEST(Export, ScoremapRowsAndAttentionMass) {
    const auto out = scratch_dir("export");
    const auto c = tiny();
    run(c, out);
    const auto ds = generate(c.synthetic, c.seed);
    for (const Bag& b : ds.bags) {
        const auto rows = csv_rows(export_scoremap(out, b.id));
        ASSERT_EQ(rows.size(), b.size());
        double mass = 0.0;
        for (std::size_t i = 0; i < rows.size(); ++i) {
            ASSERT_EQ(rows[i].size(), 5u);
            EXPECT_EQ(rows[i][0], std::to_string(i));
            mass += std::stod(rows[i][1]);
            EXPECT_TRUE(rows[i][3] == "kept" || rows[i][3] == "recycled" || rows[i][3] == "masked_high")
                << rows[i][3];
        }
        EXPECT_NEAR(mass, 1.0, 1e-8);
    }
    EXPECT_THROW(export_scoremap(out, "no_such_bag"), LoadError);
}

TEST(Export, HeldOutFoldAndBaselineRoles) {
    const auto c = tiny();
    const auto out = scratch_dir("export_roles");
    run(c, out);
    const auto split = make_folds(c, load_data(c));
    const std::size_t idx = split.folds[0].test.front();
    const std::string id = generate(c.synthetic, c.seed).bags[idx].id;
    for (const auto& r : csv_rows(export_scoremap(out, id, 0))) EXPECT_EQ(r[3], "held_out");

    const auto base = scratch_dir("export_baseline");
    run(tiny({"framework=baseline"}), base);
    for (const auto& r : csv_rows(export_scoremap(base, id))) EXPECT_EQ(r[3], "none");
}

TEST(Export, PlantedPositivesScoreHigherAfterTraining) {
    const auto c = tiny({"synthetic.separation=6", "synthetic.n_bags=24", "optim.epochs=15"});
    const auto out = scratch_dir("export_planted");
    run(c, out);
    const auto ds = generate(c.synthetic, c.seed);
    double pos = 0.0, neg = 0.0;
    std::size_t n_pos = 0, n_neg = 0;
    for (const Bag& b : ds.bags) {
        if (b.label != 1) continue;
        for (const auto& r : csv_rows(export_scoremap(out, b.id))) {
            (r[4] == "1" ? pos : neg) += std::stod(r[2]);
            (r[4] == "1" ? n_pos : n_neg) += 1;
        }
    }
    ASSERT_GT(n_pos, 0u);
    EXPECT_GT(pos / double(n_pos), neg / double(n_neg));
}

// --- binary ----------------------------------------------------------------------

TEST(Binary, ExitCodes) {
    const auto dir = scratch_dir("binary");
    {
        std::ofstream f(dir / "c.txt");
        for (const auto& a : tiny_assignments()) f << a.key << " = " << a.value << "\n";
    }
    const std::string cfg = (dir / "c.txt").string();
    EXPECT_EQ(run_cli("train --config " + cfg + " --out " + (dir / "ok").string()), 0);
    EXPECT_EQ(run_cli("train --config " + cfg + " --set nope=1 --out " + (dir / "x").string()), 2);
    EXPECT_EQ(run_cli("train --out " + (dir / "x").string()), 2);
    EXPECT_EQ(run_cli("train --config " + cfg + " --set optim.lr=1e300 --out " + (dir / "nan").string()), 3);
    EXPECT_EQ(run_cli("export --run " + (dir / "ok").string() + " --bag bag_00 --out " + dir.string()), 0);
    EXPECT_TRUE(fs::exists(dir / "scoremap_bag_00.csv"));
    EXPECT_EQ(run_cli("gen-data --config " + cfg + " --out " + (dir / "data").string()), 0);
    EXPECT_EQ(load_manifest(dir / "data" / "manifest.csv").size(), 16u);
}

TEST(Binary, SweepWritesOneRunPerPoint) {
    const auto dir = scratch_dir("sweep");
    {
        std::ofstream f(dir / "c.txt");
        for (const auto& a : tiny_assignments()) f << a.key << " = " << a.value << "\n";
    }
    ASSERT_EQ(run_cli("sweep --config " + (dir / "c.txt").string() +
                      " --grid loss.alpha=0,0.5 --jobs 2 --out " + (dir / "out").string()),
              0);
    const auto rows = csv_rows(slurp(dir / "out" / "sweep.csv"));
    ASSERT_EQ(rows.size(), 2u);
    EXPECT_TRUE(fs::exists(dir / "out" / "loss.alpha=0" / "metrics.json"));
    EXPECT_TRUE(fs::exists(dir / "out" / "loss.alpha=0.5" / "metrics.json"));
}
