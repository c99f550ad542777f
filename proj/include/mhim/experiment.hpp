// SPDX-License-Identifier: Apache-2.0
#pragma once

// Config-driven experiment runs. Needs nlohmann/json (vendor/json.hpp).

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "mhim/data.hpp"
#include "mhim/io.hpp"
#include "mhim/metrics.hpp"
#include "mhim/serialize.hpp"
#include "mhim/training.hpp"

namespace mhim {

enum class Framework { baseline, mhim_v1_attention, mhim_v2 };

inline std::string to_string(Framework f) {
    switch (f) {
        case Framework::baseline: return "baseline";
        case Framework::mhim_v1_attention: return "mhim_v1_attention";
        default: return "mhim_v2";
    }
}

struct ExperimentConfig {
    std::string dataset_kind = "synthetic";  // synthetic | manifest
    std::filesystem::path manifest;
    SyntheticSpec synthetic;
    Framework framework = Framework::mhim_v2;
    TrainConfig train;
    std::optional<std::size_t> pretrain_epochs;  // defaults to optim.epochs
    std::filesystem::path pretrained;            // empty: pretrain inside each fold
    std::size_t folds = 5;
    std::uint64_t seed = 0;

    std::size_t resolved_pretrain_epochs() const { return pretrain_epochs.value_or(train.epochs); }

    void validate() const {
        if (dataset_kind == "manifest" && manifest.empty())
            throw ConfigError("dataset.kind = manifest requires dataset.manifest");
        if (dataset_kind == "synthetic") synthetic.validate();
        if (folds < 2) throw ConfigError("folds must be >= 2");
        if (framework != Framework::baseline && train.init != InitMode::scratch && !pretrained.empty() &&
            !std::filesystem::exists(pretrained))
            throw ConfigError("init.pretrained does not exist: " + pretrained.string());
        train.validate();
    }
};

/// One `key = value` assignment and where it came from, for error messages.
struct Assignment {
    std::string key;
    std::string value;
    std::string origin;
};

namespace detail {

inline std::string trim(std::string_view s) {
    const auto first = s.find_first_not_of(" \t\r");
    if (first == std::string_view::npos) return {};
    const auto last = s.find_last_not_of(" \t\r");
    return std::string(s.substr(first, last - first + 1));
}

inline std::string format_double(double v) {
    char buf[64];
    auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, end);
}

inline std::size_t parse_size(const Assignment& a) {
    std::size_t v = 0;
    const char* b = a.value.data();
    const char* e = b + a.value.size();
    auto [ptr, ec] = std::from_chars(b, e, v);
    if (a.value.empty() || ec != std::errc() || ptr != e)
        throw ConfigError(a.origin + ": " + a.key + " expects a non-negative integer, got '" + a.value + "'");
    return v;
}

inline double parse_double(const Assignment& a) {
    double v = 0.0;
    const char* b = a.value.data();
    const char* e = b + a.value.size();
    auto [ptr, ec] = std::from_chars(b, e, v);
    if (a.value.empty() || ec != std::errc() || ptr != e || !std::isfinite(v))
        throw ConfigError(a.origin + ": " + a.key + " expects a finite number, got '" + a.value + "'");
    return v;
}

inline bool parse_bool(const Assignment& a) {
    if (a.value == "true") return true;
    if (a.value == "false") return false;
    throw ConfigError(a.origin + ": " + a.key + " expects true or false, got '" + a.value + "'");
}

template <class E>
E parse_enum(const Assignment& a, std::initializer_list<std::pair<const char*, E>> options) {
    std::string names;
    for (const auto& [name, value] : options) {
        if (a.value == name) return value;
        names += names.empty() ? name : std::string("|") + name;
    }
    throw ConfigError(a.origin + ": " + a.key + " expects one of " + names + ", got '" + a.value + "'");
}

struct KeySpec {
    const char* key;
    std::function<void(ExperimentConfig&, const Assignment&)> set;
    std::function<std::string(const ExperimentConfig&)> get;
};

inline const std::vector<KeySpec>& key_table() {
    using C = ExperimentConfig;
    using A = Assignment;
    auto sz = [](auto member) {
        return std::pair{[member](C& c, const A& a) { member(c) = parse_size(a); },
                         [member](const C& c) { return std::to_string(member(c)); }};
    };
    auto dbl = [](auto member) {
        return std::pair{[member](C& c, const A& a) { member(c) = parse_double(a); },
                         [member](const C& c) { return format_double(member(c)); }};
    };
    auto boolean = [](auto member) {
        return std::pair{[member](C& c, const A& a) { member(c) = parse_bool(a); },
                         [member](const C& c) { return std::string(member(c) ? "true" : "false"); }};
    };
    auto entry = [](const char* key, auto pair) { return KeySpec{key, pair.first, pair.second}; };

    static const std::vector<KeySpec> table = {
        {"framework",
         [](C& c, const A& a) {
             c.framework = parse_enum<Framework>(a, {{"baseline", Framework::baseline},
                                                     {"mhim_v1_attention", Framework::mhim_v1_attention},
                                                     {"mhim_v2", Framework::mhim_v2}});
         },
         [](const C& c) { return to_string(c.framework); }},
        {"dataset.kind",
         [](C& c, const A& a) {
             if (a.value != "synthetic" && a.value != "manifest")
                 throw ConfigError(a.origin + ": dataset.kind expects synthetic|manifest, got '" + a.value + "'");
             c.dataset_kind = a.value;
         },
         [](const C& c) { return c.dataset_kind; }},
        {"dataset.manifest", [](C& c, const A& a) { c.manifest = a.value; },
         [](const C& c) { return c.manifest.string(); }},
        entry("synthetic.n_bags", sz([](auto& c) -> auto& { return c.synthetic.n_bags; })),
        entry("synthetic.min_instances", sz([](auto& c) -> auto& { return c.synthetic.min_instances; })),
        entry("synthetic.max_instances", sz([](auto& c) -> auto& { return c.synthetic.max_instances; })),
        entry("synthetic.input_dim", sz([](auto& c) -> auto& { return c.synthetic.input_dim; })),
        entry("synthetic.positive_ratio", dbl([](auto& c) -> auto& { return c.synthetic.positive_ratio; })),
        entry("synthetic.separation", dbl([](auto& c) -> auto& { return c.synthetic.separation; })),
        entry("synthetic.noise_ratio", dbl([](auto& c) -> auto& { return c.synthetic.noise_ratio; })),
        {"model.family",
         [](C& c, const A& a) {
             c.train.model.family = parse_enum<Family>(a, {{"gated", Family::gated}, {"msa", Family::msa}});
         },
         [](const C& c) { return to_string(c.train.model.family); }},
        entry("model.hidden_dim", sz([](auto& c) -> auto& { return c.train.model.hidden_dim; })),
        entry("model.attention_dim", sz([](auto& c) -> auto& { return c.train.model.attention_dim; })),
        entry("model.layers", sz([](auto& c) -> auto& { return c.train.model.layers; })),
        entry("model.heads", sz([](auto& c) -> auto& { return c.train.model.heads; })),
        entry("model.num_classes", sz([](auto& c) -> auto& { return c.train.model.num_classes; })),
        entry("mining.high_ratio", dbl([](auto& c) -> auto& { return c.train.high_ratio; })),
        entry("mining.decay", boolean([](auto& c) -> auto& { return c.train.high_ratio_decay; })),
        entry("mining.low_ratio", dbl([](auto& c) -> auto& { return c.train.low_ratio; })),
        {"mining.strategy",
         [](C& c, const A& a) {
             c.train.strategy = parse_enum<LargeScaleStrategy>(
                 a, {{"rsm", LargeScaleStrategy::rsm}, {"lsm", LargeScaleStrategy::lsm}});
         },
         [](const C& c) { return to_string(c.train.strategy); }},
        {"mining.source",
         [](C& c, const A& a) {
             c.train.source = parse_enum<ScoreSource>(
                 a, {{"attention", ScoreSource::attention},
                     {"instance_probability", ScoreSource::instance_probability}});
         },
         [](const C& c) { return to_string(c.train.source); }},
        entry("grn.queries", sz([](auto& c) -> auto& { return c.train.queries; })),
        entry("grn.momentum", dbl([](auto& c) -> auto& { return c.train.query_momentum; })),
        entry("grn.heads", sz([](auto& c) -> auto& { return c.train.recycle_heads; })),
        entry("loss.alpha", dbl([](auto& c) -> auto& { return c.train.alpha; })),
        entry("loss.tau", dbl([](auto& c) -> auto& { return c.train.tau; })),
        entry("optim.lr", dbl([](auto& c) -> auto& { return c.train.adam.lr; })),
        entry("optim.weight_decay", dbl([](auto& c) -> auto& { return c.train.adam.weight_decay; })),
        entry("optim.epochs", sz([](auto& c) -> auto& { return c.train.epochs; })),
        entry("optim.early_stopping", boolean([](auto& c) -> auto& { return c.train.early_stopping; })),
        entry("optim.patience", sz([](auto& c) -> auto& { return c.train.patience; })),
        entry("optim.teacher_momentum", dbl([](auto& c) -> auto& { return c.train.teacher_momentum; })),
        {"init.mode",
         [](C& c, const A& a) {
             c.train.init = parse_enum<InitMode>(
                 a, {{"scratch", InitMode::scratch},
                     {"teacher_init", InitMode::teacher_init},
                     {"teacher_and_student_proj_init", InitMode::teacher_and_student_proj_init}});
         },
         [](const C& c) { return to_string(c.train.init); }},
        {"init.pretrained", [](C& c, const A& a) { c.pretrained = a.value; },
         [](const C& c) { return c.pretrained.string(); }},
        {"pretrain.epochs", [](C& c, const A& a) { c.pretrain_epochs = parse_size(a); },
         [](const C& c) { return std::to_string(c.resolved_pretrain_epochs()); }},
        entry("folds", sz([](auto& c) -> auto& { return c.folds; })),
        {"seed",
         [](C& c, const A& a) {
             std::uint64_t v = 0;
             auto [ptr, ec] = std::from_chars(a.value.data(), a.value.data() + a.value.size(), v);
             if (a.value.empty() || ec != std::errc() || ptr != a.value.data() + a.value.size())
                 throw ConfigError(a.origin + ": seed expects a non-negative integer, got '" + a.value + "'");
             c.seed = v;
         },
         [](const C& c) { return std::to_string(c.seed); }},
    };
    return table;
}

inline const KeySpec* find_key(const std::string& key) {
    for (const KeySpec& k : key_table())
        if (key == k.key) return &k;
    return nullptr;
}

inline void apply_preset(ExperimentConfig& c) {
    switch (c.framework) {
        case Framework::baseline:
            c.train.high_ratio = 0.0;
            c.train.low_ratio = 0.0;
            c.train.queries = 0;
            c.train.alpha = 0.0;
            c.train.teacher_momentum = 1.0;
            c.train.init = InitMode::scratch;
            break;
        case Framework::mhim_v1_attention:
            c.train.source = ScoreSource::attention;
            c.train.low_ratio = 0.0;
            c.train.queries = 0;
            break;
        case Framework::mhim_v2:
            break;
    }
}

}  // namespace detail

/// Splits `key = value` lines; `#` starts a comment. Keys are not checked here.
inline std::vector<Assignment> parse_config_text(std::string_view text, const std::string& origin) {
    std::vector<Assignment> out;
    std::istringstream in{std::string(text)};
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        const std::string body = detail::trim(line);
        if (body.empty()) continue;
        const auto eq = body.find('=');
        const std::string where = origin + ":" + std::to_string(line_no);
        if (eq == std::string::npos) throw ConfigError(where + ": expected key = value");
        Assignment a{detail::trim(body.substr(0, eq)), detail::trim(body.substr(eq + 1)), where};
        if (a.key.empty()) throw ConfigError(where + ": empty key");
        out.push_back(std::move(a));
    }
    return out;
}

/// Parses a single `key=value` override.
inline Assignment parse_override(const std::string& text, const std::string& origin = "--set") {
    const auto eq = text.find('=');
    if (eq == std::string::npos) throw ConfigError(origin + " expects key=value, got '" + text + "'");
    return {detail::trim(text.substr(0, eq)), detail::trim(text.substr(eq + 1)), origin + " " + text};
}

/**
 * Applies assignments in order after the framework preset; later ones win.
 * Unknown keys are rejected before anything is applied.
 */
inline ExperimentConfig resolve_config(const std::vector<Assignment>& assignments) {
    for (const Assignment& a : assignments)
        if (!detail::find_key(a.key)) throw ConfigError(a.origin + ": unknown key '" + a.key + "'");
    ExperimentConfig c;
    for (const Assignment& a : assignments)
        if (a.key == "framework") detail::find_key(a.key)->set(c, a);
    detail::apply_preset(c);
    for (const Assignment& a : assignments)
        if (a.key != "framework") detail::find_key(a.key)->set(c, a);
    c.train.seed = c.seed;
    c.validate();
    return c;
}

/// File keys, then MHIM_SEED (if given), then overrides.
inline ExperimentConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {},
                                    const char* env_seed = nullptr) {
    std::vector<Assignment> all;
    if (!path.empty()) {
        std::string text;
        try {
            text = io::read_file(path);
        } catch (const LoadError& e) {
            throw ConfigError(e.what());
        }
        all = parse_config_text(text, path.string());
    }
    if (env_seed != nullptr && *env_seed != '\0') all.push_back({"seed", env_seed, "MHIM_SEED"});
    for (const std::string& o : overrides) all.push_back(parse_override(o));
    return resolve_config(all);
}

/// Every key with its resolved value; re-reading it reproduces the config.
inline std::string resolved_config_text(const ExperimentConfig& c) {
    std::string out;
    for (const detail::KeySpec& k : detail::key_table()) out += std::string(k.key) + " = " + k.get(c) + "\n";
    return out;
}

// --- data ------------------------------------------------------------------------

struct ExperimentData {
    std::vector<Bag> bags;
    std::vector<PlantedLabels> planted;  // empty for manifest data
};

inline ExperimentData load_data(const ExperimentConfig& c) {
    ExperimentData d;
    if (c.dataset_kind == "synthetic") {
        SyntheticDataset ds = generate(c.synthetic, c.seed);
        d.bags = std::move(ds.bags);
        d.planted = std::move(ds.planted);
    } else {
        d.bags = load_manifest(c.manifest);
    }
    const std::size_t dim = d.bags.front().features.cols();
    for (const Bag& b : d.bags) {
        if (b.features.cols() != dim)
            throw LoadError("bag " + b.id + " has " + std::to_string(b.features.cols()) +
                            " features, expected " + std::to_string(dim));
        if (b.label >= c.train.model.num_classes)
            throw ConfigError("bag " + b.id + " label " + std::to_string(b.label) + " exceeds model.num_classes");
    }
    return d;
}

/// Training config with the input width taken from the data.
inline TrainConfig train_config_for(const ExperimentConfig& c, const ExperimentData& d) {
    TrainConfig t = c.train;
    t.model.input_dim = d.bags.front().features.cols();
    t.validate();
    return t;
}

inline std::vector<std::size_t> labels_of(const std::vector<Bag>& bags) {
    std::vector<std::size_t> y;
    for (const Bag& b : bags) y.push_back(b.label);
    return y;
}

inline FoldSplit make_folds(const ExperimentConfig& c, const ExperimentData& d) {
    const auto labels = labels_of(d.bags);
    FoldSplit split = kfold(labels, c.folds, c.seed);
    if (!folds_cover_all_classes(split, labels))
        throw ConfigError("folds = " + std::to_string(c.folds) + " leaves a test fold without every class");
    return split;
}

// --- results ---------------------------------------------------------------------

namespace detail {

// JSON cannot hold infinities; they are written as strings.
inline nlohmann::json number_or_string(double v) {
    if (std::isfinite(v)) return v;
    if (std::isnan(v)) return "nan";
    return v > 0 ? "inf" : "-inf";
}

inline nlohmann::json report_json(const MetricReport& r) {
    return {{"auc", r.auc},
            {"accuracy", r.accuracy},
            {"f1", r.f1},
            {"optimal_threshold", number_or_string(r.optimal_threshold)},
            {"criterion", r.criterion},
            {"n_pos", r.n_pos},
            {"n_neg", r.n_neg}};
}

inline nlohmann::json mean_std_json(const MeanStd& m) { return {{"mean", m.mean}, {"std", m.std}}; }

inline nlohmann::json aggregate_json(const AggregateReport& a, std::span<const MetricReport> folds,
                                     const ExperimentConfig& c) {
    nlohmann::json per_fold = nlohmann::json::array();
    for (const MetricReport& r : folds) per_fold.push_back(report_json(r));
    return {{"framework", to_string(c.framework)},
            {"seed", c.seed},
            {"folds", per_fold},
            {"auc", mean_std_json(a.auc)},
            {"accuracy", mean_std_json(a.accuracy)},
            {"f1", mean_std_json(a.f1)}};
}

inline std::string dump(const nlohmann::json& j) { return j.dump(2) + "\n"; }

// Re-throws a library error with context prepended, keeping its type.
template <class F>
auto with_context(const std::string& context, F&& f) -> decltype(f()) {
    try {
        return f();
    } catch (const NumericError& e) {
        throw NumericError(context + ": " + e.what());
    } catch (const ConfigError& e) {
        throw ConfigError(context + ": " + e.what());
    } catch (const LoadError& e) {
        throw LoadError(context + ": " + e.what());
    } catch (const UndefinedMetricError& e) {
        throw UndefinedMetricError(context + ": " + e.what());
    } catch (const ContractError& e) {
        throw ContractError(context + ": " + e.what());
    } catch (const Error& e) {
        throw Error(context + ": " + e.what());
    }
}

inline std::vector<Bag> subset(const std::vector<Bag>& bags, std::span<const std::size_t> idx) {
    std::vector<Bag> out;
    for (std::size_t i : idx) out.push_back(bags[i]);
    return out;
}

}  // namespace detail

struct TrainedFold {
    Student student;
    std::optional<MilModel> teacher;
    std::vector<EpochRecord> history;
    std::map<std::string, RecordedPlan> last_plans;
};

/// Trains one split according to the framework; pretrains first when the init mode needs it.
inline TrainedFold train_split(const ExperimentConfig& c, const TrainConfig& tc, const std::vector<Bag>& train,
                               std::vector<NamedMatrix>* pretrained_out = nullptr) {
    if (c.framework == Framework::baseline) {
        BaselineFitResult r = pretrain_baseline(train, tc);
        return {Student::plain(std::move(r.model)), std::nullopt, std::move(r.history), {}};
    }
    std::vector<NamedMatrix> pretrained;
    if (tc.init != InitMode::scratch) {
        if (!c.pretrained.empty()) {
            pretrained = load_parameters(c.pretrained);
        } else {
            TrainConfig pc = tc;
            pc.epochs = c.resolved_pretrain_epochs();
            BaselineFitResult pre = pretrain_baseline(train, pc);
            pretrained = snapshot(pre.model.parameters());
        }
        if (pretrained_out) *pretrained_out = pretrained;
    }
    FitResult r = fit(train, tc, pretrained);
    return {std::move(r.state.student), std::move(r.state.teacher), std::move(r.history), std::move(r.last_plans)};
}

/// Student shaped to receive a stored parameter file of this framework.
inline Student blank_student(const ExperimentConfig& c, const TrainConfig& tc) {
    if (c.framework == Framework::baseline) return Student::plain(MilModel(tc.model));
    return Student(tc);
}

inline MetricReport evaluate_student(Student& student, const std::vector<Bag>& bags, std::size_t num_classes,
                                     nlohmann::json* predictions = nullptr) {
    std::vector<std::vector<double>> probs;
    for (const Bag& b : bags) {
        probs.push_back(detail::with_context("bag " + b.id, [&] { return infer(student, b.features).probabilities; }));
        if (predictions) predictions->push_back({{"bag_id", b.id}, {"label", b.label}, {"probabilities", probs.back()}});
    }
    const auto labels = labels_of(bags);
    return evaluate_predictions(probs, labels, num_classes);
}

struct RunSummary {
    std::vector<MetricReport> folds;
    AggregateReport aggregate;
};

/**
 * Full cross-validated run. Output layout:
 *   config.resolved.txt, metrics.json,
 *   fold_<i>/{history.csv, mask_plan.csv, student.params, teacher.params, metrics.json}
 */
inline RunSummary run(const ExperimentConfig& c, const std::filesystem::path& out) {
    c.validate();
    io::write_file_atomic(out / "config.resolved.txt", resolved_config_text(c));
    const ExperimentData data = load_data(c);
    const TrainConfig tc = train_config_for(c, data);
    const FoldSplit split = make_folds(c, data);

    RunSummary summary;
    for (std::size_t f = 0; f < split.folds.size(); ++f) {
        const std::filesystem::path dir = out / ("fold_" + std::to_string(f));
        const auto train = detail::subset(data.bags, split.folds[f].train);
        const auto test = detail::subset(data.bags, split.folds[f].test);
        detail::with_context("fold " + std::to_string(f), [&] {
            TrainedFold t = train_split(c, tc, train);
            nlohmann::json predictions = nlohmann::json::array();
            const MetricReport report = evaluate_student(t.student, test, tc.model.num_classes, &predictions);

            io::write_file_atomic(dir / "history.csv", history_csv(t.history));
            std::ostringstream plans;
            plans.precision(17);
            plans << kMaskPlanCsvHeader << '\n';
            for (const auto& [id, rec] : t.last_plans) write_mask_plan_rows(plans, id, rec.plan, rec.scores);
            io::write_file_atomic(dir / "mask_plan.csv", plans.str());
            io::write_file_atomic(dir / "student.params", encode_parameters(t.student.snapshot()));
            if (t.teacher)
                io::write_file_atomic(dir / "teacher.params", encode_parameters(snapshot(t.teacher->parameters())));

            nlohmann::json j = detail::report_json(report);
            j["fold"] = f;
            j["n_train"] = train.size();
            j["n_test"] = test.size();
            j["predictions"] = predictions;
            io::write_file_atomic(dir / "metrics.json", detail::dump(j));
            summary.folds.push_back(report);
        });
    }
    summary.aggregate = aggregate(summary.folds);
    io::write_file_atomic(out / "metrics.json", detail::dump(detail::aggregate_json(summary.aggregate, summary.folds, c)));
    return summary;
}

/// Config stored with a finished run.
inline ExperimentConfig load_run_config(const std::filesystem::path& run_dir) {
    const auto path = run_dir / "config.resolved.txt";
    if (!std::filesystem::exists(path)) throw LoadError("no trained run at " + run_dir.string());
    return resolve_config(parse_config_text(io::read_file(path), path.string()));
}

inline Student load_fold_student(const ExperimentConfig& c, const TrainConfig& tc,
                                 const std::filesystem::path& run_dir, std::size_t fold) {
    Student s = blank_student(c, tc);
    s.restore(load_parameters(run_dir / ("fold_" + std::to_string(fold)) / "student.params"));
    return s;
}

/**
 * Re-scores stored students. Without `dataset`, each fold's student is scored
 * on its own held-out fold of the run's data; with it, every student is
 * scored on all bags of that dataset.
 */
inline RunSummary evaluate_run(const std::filesystem::path& run_dir, const std::filesystem::path& out,
                               const std::optional<ExperimentConfig>& dataset = std::nullopt) {
    const ExperimentConfig c = load_run_config(run_dir);
    const ExperimentData data = load_data(dataset ? *dataset : c);
    const TrainConfig tc = train_config_for(c, data);
    RunSummary summary;
    if (dataset) {
        for (std::size_t f = 0; f < c.folds; ++f) {
            Student s = load_fold_student(c, tc, run_dir, f);
            summary.folds.push_back(evaluate_student(s, data.bags, tc.model.num_classes));
        }
    } else {
        const FoldSplit split = make_folds(c, data);
        for (std::size_t f = 0; f < split.folds.size(); ++f) {
            Student s = load_fold_student(c, tc, run_dir, f);
            summary.folds.push_back(
                evaluate_student(s, detail::subset(data.bags, split.folds[f].test), tc.model.num_classes));
        }
    }
    summary.aggregate = aggregate(summary.folds);
    io::write_file_atomic(out / "metrics.json", detail::dump(detail::aggregate_json(summary.aggregate, summary.folds, c)));
    return summary;
}

// --- score maps ------------------------------------------------------------------

inline constexpr const char* kScoremapCsvHeader =
    "instance_idx,attention,instance_probability,mask_role_at_final_epoch,planted_label_if_synthetic";

/**
 * Per-instance scores for one bag. The model is the student of `fold`, or by
 * default of the first fold that trained on the bag, so the mask role comes
 * from the same run. Held-out bags have role "held_out"; baseline runs "none".
 */
inline std::string export_scoremap(const std::filesystem::path& run_dir, const std::string& bag_id,
                                   std::optional<std::size_t> fold = std::nullopt) {
    const ExperimentConfig c = load_run_config(run_dir);
    const ExperimentData data = load_data(c);
    const TrainConfig tc = train_config_for(c, data);
    const auto it = std::find_if(data.bags.begin(), data.bags.end(), [&](const Bag& b) { return b.id == bag_id; });
    if (it == data.bags.end()) throw LoadError("unknown bag '" + bag_id + "' in run " + run_dir.string());
    const std::size_t index = static_cast<std::size_t>(it - data.bags.begin());

    const FoldSplit split = make_folds(c, data);
    if (fold && *fold >= split.folds.size())
        throw ConfigError("fold " + std::to_string(*fold) + " out of range");
    std::size_t chosen = fold.value_or(0);
    bool in_train = false;
    for (std::size_t f = 0; f < split.folds.size() && !fold; ++f) {
        const auto& tr = split.folds[f].train;
        if (std::find(tr.begin(), tr.end(), index) != tr.end()) {
            chosen = f;
            break;
        }
    }
    const auto& tr = split.folds[chosen].train;
    in_train = std::find(tr.begin(), tr.end(), index) != tr.end();

    const Bag& bag = *it;
    std::vector<std::string> roles(bag.size(), c.framework == Framework::baseline ? "none" : "held_out");
    if (in_train && c.framework != Framework::baseline) {
        std::istringstream plans(io::read_file(run_dir / ("fold_" + std::to_string(chosen)) / "mask_plan.csv"));
        std::string line;
        std::getline(plans, line);
        std::size_t found = 0;
        while (std::getline(plans, line)) {
            std::istringstream fields(line);
            std::string id, idx, score, role;
            std::getline(fields, id, ',');
            if (id != bag_id) continue;
            std::getline(fields, idx, ',');
            std::getline(fields, score, ',');
            std::getline(fields, role);
            const std::size_t i = std::stoul(idx);
            if (i >= roles.size()) throw LoadError("mask_plan.csv row index out of range for " + bag_id);
            roles[i] = role;
            ++found;
        }
        if (found != bag.size()) throw LoadError("mask_plan.csv lacks rows for " + bag_id);
    }

    Student student = load_fold_student(c, tc, run_dir, chosen);
    const InferResult r = infer(student, bag.features);
    std::ostringstream os;
    os.precision(17);
    os << kScoremapCsvHeader << '\n';
    for (std::size_t i = 0; i < bag.size(); ++i) {
        os << i << ',' << r.attention[i] << ',' << r.instance_scores[i] << ',' << roles[i] << ',';
        if (!data.planted.empty()) os << int(data.planted[index].positive[i]);
        os << '\n';
    }
    return os.str();
}

// --- sweeps ----------------------------------------------------------------------

struct GridAxis {
    std::string key;
    std::vector<std::string> values;
};

/// Parses `key=v1,v2,...`.
inline GridAxis parse_grid_axis(const std::string& text) {
    const auto eq = text.find('=');
    if (eq == std::string::npos) throw ConfigError("--grid expects key=v1,v2,..., got '" + text + "'");
    GridAxis axis{detail::trim(text.substr(0, eq)), {}};
    if (!detail::find_key(axis.key)) throw ConfigError("--grid: unknown key '" + axis.key + "'");
    std::istringstream in(text.substr(eq + 1));
    std::string v;
    while (std::getline(in, v, ',')) axis.values.push_back(detail::trim(v));
    if (axis.values.empty()) throw ConfigError("--grid " + axis.key + " lists no values");
    return axis;
}

/// Cartesian product of the axes, first axis slowest.
inline std::vector<std::vector<Assignment>> expand_grid(const std::vector<GridAxis>& axes) {
    std::vector<std::vector<Assignment>> combos{{}};
    for (const GridAxis& axis : axes) {
        std::vector<std::vector<Assignment>> next;
        for (const auto& base : combos) {
            for (const std::string& v : axis.values) {
                auto c = base;
                c.push_back({axis.key, v, "--grid " + axis.key + "=" + v});
                next.push_back(std::move(c));
            }
        }
        combos = std::move(next);
    }
    return combos;
}

/// Directory name for one grid point, e.g. `loss.alpha=0.5_mining.low_ratio=0.8`.
inline std::string grid_point_name(const std::vector<Assignment>& point) {
    std::string name;
    for (const Assignment& a : point) {
        if (!name.empty()) name += '_';
        name += a.key + '=' + a.value;
    }
    for (char& ch : name)
        if (ch == '/' || ch == '\\' || ch == ' ') ch = '-';
    return name.empty() ? "base" : name;
}

}  // namespace mhim
