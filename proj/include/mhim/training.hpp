// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <filesystem>
#include <limits>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "mhim/aggregators.hpp"
#include "mhim/data.hpp"
#include "mhim/metrics.hpp"
#include "mhim/mining.hpp"
#include "mhim/optim.hpp"
#include "mhim/recycle.hpp"
#include "mhim/serialize.hpp"

namespace mhim {

enum class InitMode { scratch, teacher_init, teacher_and_student_proj_init };

inline std::string to_string(InitMode m) {
    switch (m) {
        case InitMode::scratch: return "scratch";
        case InitMode::teacher_init: return "teacher_init";
        case InitMode::teacher_and_student_proj_init: return "teacher_and_student_proj_init";
    }
    return "?";
}

/// Every hyperparameter of one training run.
struct TrainConfig {
    ModelConfig model;

    // masked hard instance mining
    double high_ratio = 0.02;  // effective masked fraction at step 0
    bool high_ratio_decay = true;
    double low_ratio = 0.8;
    LargeScaleStrategy strategy = LargeScaleStrategy::rsm;
    ScoreSource source = ScoreSource::instance_probability;

    // global recycle network
    std::size_t queries = 16;
    double query_momentum = 0.9;
    std::size_t recycle_heads = 8;

    // losses
    double alpha = 0.5;
    double tau = 0.5;

    // optimization
    AdamConfig adam;
    std::size_t epochs = 200;
    bool early_stopping = true;
    std::size_t patience = 20;
    double teacher_momentum = 0.9999;
    InitMode init = InitMode::teacher_and_student_proj_init;
    std::uint64_t seed = 0;

    void validate() const {
        model.validate();
        if (!(high_ratio >= 0.0 && high_ratio < 0.5))
            throw ConfigError("mining.high_ratio must lie in [0, 0.5)");
        if (!(low_ratio >= 0.0 && low_ratio < 1.0))
            throw ConfigError("mining.low_ratio must lie in [0, 1)");
        if (queries > 0 && (recycle_heads == 0 || model.hidden_dim % recycle_heads != 0))
            throw ConfigError("grn.heads must divide model.hidden_dim");
        if (!(query_momentum >= 0.0 && query_momentum < 1.0))
            throw ConfigError("grn.momentum must lie in [0, 1)");
        if (!(alpha >= 0.0)) throw ConfigError("loss.alpha must be >= 0");
        if (!(tau > 0.0)) throw ConfigError("loss.tau must be > 0");
        if (!(adam.lr >= 0.0) || !(adam.weight_decay >= 0.0))
            throw ConfigError("optimizer lr and weight decay must be >= 0");
        if (!(teacher_momentum >= 0.0 && teacher_momentum <= 1.0))
            throw ConfigError("optim.teacher_momentum must lie in [0, 1]");
    }
};

/// Student network: aggregator model plus the recycle network and its queries.
struct Student {
    MilModel model;
    McaParams grn;
    GlobalQueries queries;

    explicit Student(const TrainConfig& cfg)
        : model(cfg.model),
          grn(cfg.model.hidden_dim, cfg.queries > 0 ? cfg.recycle_heads : 1),
          queries{Matrix(0, cfg.model.hidden_dim), cfg.query_momentum} {}

    /// Wraps a plain model without a recycle network.
    static Student plain(MilModel m) {
        TrainConfig cfg;
        cfg.model = m.config();
        cfg.queries = 0;
        Student s(cfg);
        s.model = std::move(m);
        return s;
    }

    /// Gradient-trained parameters: model first, then the recycle network.
    std::vector<Parameter*> parameters() {
        auto out = model.parameters();
        for (Parameter* p : grn.parameters()) out.push_back(p);
        return out;
    }

    /// Everything needed to restore the student, queries included.
    std::vector<NamedMatrix> snapshot() {
        auto out = mhim::snapshot(parameters());
        out.push_back({"grn.queries", queries.queries});
        return out;
    }

    void restore(std::span<const NamedMatrix> stored) {
        if (stored.empty() || stored.back().name != "grn.queries")
            throw LoadError("student parameter file lacks grn.queries");
        mhim::restore(parameters(), stored.first(stored.size() - 1));
        queries.queries = stored.back().value;
    }
};

struct SiameseState {
    TrainConfig config;
    Student student;
    MilModel teacher;  // no recycle network; parameters are never trainable
    Adam optimizer;
    std::size_t step = 0;
    std::size_t total_steps = 0;  // schedule horizon for lr and ratio decay
};

struct LossReport {
    double cls = 0.0;
    double con = 0.0;
    double total = 0.0;
    double alpha = 0.0;
    double tau = 0.0;
};

struct StepResult {
    LossReport loss;
    MaskPlan plan;
    InstanceScores scores;
    std::vector<double> probabilities;  // student output on the mined bag
    double lr = 0.0;
};

/// Cross-entropy between softmax(F_t / tau) and the student's log-softmax(F_s).
/// The teacher side is a constant, so gradient reaches F_s only.
inline Var consistency_loss(Tape& t, Var student_embedding, const Matrix& teacher_embedding,
                            double tau) {
    if (!(tau > 0.0)) throw ParameterError("consistency temperature must be positive");
    Var target = t.constant(kernel::softmax_rows(teacher_embedding, tau));
    return scale(sum(mul(target, log_softmax(student_embedding))), -1.0);
}

inline double consistency_loss(const Matrix& teacher_embedding, const Matrix& student_embedding,
                               double tau) {
    Tape t(false);
    return consistency_loss(t, t.constant(student_embedding), teacher_embedding, tau).value()[0];
}

/// Bag classification loss: BCE on one logit, softmax cross-entropy otherwise.
inline Var classification_loss(Var logits, std::size_t label) {
    if (logits.cols() == 1) return bce_with_logits(logits, static_cast<double>(label));
    return cross_entropy_logits(logits, label);
}

namespace detail {

inline void require_finite(const Matrix& m, const std::string& what) {
    if (!all_finite(m)) throw NumericError("non-finite values in " + what);
}

inline std::vector<std::size_t> iota_range(std::size_t begin, std::size_t end) {
    std::vector<std::size_t> v(end - begin);
    std::iota(v.begin(), v.end(), begin);
    return v;
}

inline void zero_grads(std::span<Parameter* const> params) {
    for (Parameter* p : params) p->zero_grad();
}

}  // namespace detail

/**
 * Builds the siamese state. Scratch mode draws student and teacher
 * independently; the init modes copy a pretrained baseline into the teacher
 * and optionally into the student's projection layer.
 */
inline SiameseState initialize(const TrainConfig& cfg, std::span<const NamedMatrix> pretrained = {}) {
    cfg.validate();
    SiameseState s{cfg, Student(cfg), MilModel(cfg.model), Adam(cfg.adam), 0, 0};
    Rng student_rng(cfg.seed, "init.student");
    s.student.model.init(student_rng);
    Rng grn_rng(cfg.seed, "init.grn");
    s.student.grn.init(grn_rng);
    Rng query_rng(cfg.seed, "init.queries");
    s.student.queries = make_global_queries(cfg.queries, cfg.model.hidden_dim, cfg.query_momentum, query_rng);

    if (cfg.init == InitMode::scratch) {
        Rng teacher_rng(cfg.seed, "init.teacher");
        s.teacher.init(teacher_rng);
    } else {
        if (pretrained.empty())
            throw LoadError("init mode " + to_string(cfg.init) + " needs a pretrained baseline");
        restore(s.teacher.parameters(), pretrained);
        if (cfg.init == InitMode::teacher_and_student_proj_init) {
            Linear& proj = s.student.model.projection();
            Parameter* targets[] = {&proj.weight, &proj.bias};
            restore(targets, pretrained.first(2));
        }
    }
    s.teacher.set_trainable(false);
    return s;
}

inline SiameseState initialize(const TrainConfig& cfg, const std::filesystem::path& pretrained) {
    const auto stored = load_parameters(pretrained);
    return initialize(cfg, stored);
}

struct HardForward {
    BagOutput out;
    Var recovered;  // K x D recycle network output
};

/**
 * Student forward on a mined bag: project the kept and recycled rows, recover
 * K rows from the recycled ones, aggregate [kept; recovered]. Queries are read,
 * not updated.
 */
inline HardForward student_hard_forward(Tape& t, Student& student, const Matrix& features,
                                        std::span<const std::size_t> kept_idx,
                                        std::span<const std::size_t> recycle_idx) {
    std::vector<std::size_t> rows(kept_idx.begin(), kept_idx.end());
    rows.insert(rows.end(), recycle_idx.begin(), recycle_idx.end());
    Var h = student.model.project(t, t.constant(kernel::gather_rows(features, rows)));
    Var kept = gather_rows(h, detail::iota_range(0, kept_idx.size()));
    Var masked = gather_rows(h, detail::iota_range(kept_idx.size(), rows.size()));
    Var recovered = grn_forward(t, student.queries, student.grn, masked);
    return {student.model.aggregate(t, assemble(kept, recovered)), recovered};
}

/**
 * One siamese optimization step on one bag:
 * teacher assessment on the full bag, masked hard instance mining, recycle
 * network, student forward on the hard sequence, L = L_cls + alpha L_con,
 * Adam on the student, EMA of the teacher.
 */
inline StepResult train_step(SiameseState& s, const Bag& bag, Rng& rng) {
    const TrainConfig& cfg = s.config;
    if (bag.size() == 0) throw ContractError("train_step: empty bag " + bag.id);

    Tape teacher_tape(false);
    BagOutput teacher_out = [&] {
        try {
            return s.teacher.forward(teacher_tape, bag.features);
        } catch (const NumericError& e) {
            throw NumericError("teacher forward on bag " + bag.id + ": " + e.what());
        }
    }();
    const Matrix teacher_embedding = teacher_out.embedding.value();
    detail::require_finite(teacher_embedding, "teacher bag embedding (" + bag.id + ")");

    StepResult r;
    r.scores = assess(teacher_out.attention, s.teacher.classifier(), teacher_out.projected.value(), cfg.source);
    const double ratio = cfg.high_ratio_decay
                             ? decayed_ratio({cfg.high_ratio, s.total_steps}, s.step)
                             : cfg.high_ratio;
    r.plan = plan_masks(r.scores, ratio, cfg.low_ratio, cfg.strategy, rng);

    // A bag too small to keep any instance is trained on unmasked.
    std::vector<std::size_t> kept_idx = r.plan.kept;
    std::vector<std::size_t> recycle_idx = r.plan.recycle;
    if (kept_idx.empty()) {
        kept_idx = detail::iota_range(0, bag.size());
        recycle_idx.clear();
    }

    Tape t;
    HardForward hard = [&] {
        try {
            return student_hard_forward(t, s.student, bag.features, kept_idx, recycle_idx);
        } catch (const NumericError& e) {
            throw NumericError("student forward on bag " + bag.id + ": " + e.what());
        }
    }();
    detail::require_finite(hard.recovered.value(), "recycled features (" + bag.id + ")");
    if (hard.recovered.rows() > 0 && !recycle_idx.empty())
        update_queries(s.student.queries, hard.recovered.value());
    BagOutput& out = hard.out;
    detail::require_finite(out.logits.value(), "student logits (" + bag.id + ")");
    detail::require_finite(out.embedding.value(), "student bag embedding (" + bag.id + ")");

    Var cls = classification_loss(out.logits, bag.label);
    Var con = consistency_loss(t, out.embedding, teacher_embedding, cfg.tau);
    Var total = cfg.alpha == 0.0 ? cls : add(cls, scale(con, cfg.alpha));
    r.loss = {cls.value()[0], con.value()[0], total.value()[0], cfg.alpha, cfg.tau};
    if (!std::isfinite(r.loss.cls)) throw NumericError("non-finite L_cls on bag " + bag.id);
    if (!std::isfinite(r.loss.con)) throw NumericError("non-finite L_con on bag " + bag.id);
    r.probabilities = class_probabilities(out.logits.value());

    t.backward(total);
    auto params = s.student.parameters();
    r.lr = cosine_lr(cfg.adam.lr, s.step, s.total_steps);
    s.optimizer.step(params, r.lr);
    detail::zero_grads(params);

    auto teacher_params = s.teacher.parameters();
    auto student_params = s.student.model.parameters();
    ema_update(teacher_params, student_params, cfg.teacher_momentum);
    ++s.step;
    return r;
}

// --- plain baseline trainer --------------------------------------------------

struct BaselineState {
    TrainConfig config;
    MilModel model;
    Adam optimizer;
    std::size_t step = 0;
    std::size_t total_steps = 0;
};

inline BaselineState initialize_baseline(const TrainConfig& cfg) {
    cfg.validate();
    BaselineState s{cfg, MilModel(cfg.model), Adam(cfg.adam), 0, 0};
    Rng rng(cfg.seed, "init.student");
    s.model.init(rng);
    return s;
}

/// Full-bag forward, classification loss, Adam. Returns the loss and output probabilities.
inline std::pair<double, std::vector<double>> baseline_step(BaselineState& s, const Bag& bag) {
    Tape t;
    BagOutput out = [&] {
        try {
            return s.model.forward(t, bag.features);
        } catch (const NumericError& e) {
            throw NumericError("forward on bag " + bag.id + ": " + e.what());
        }
    }();
    detail::require_finite(out.logits.value(), "baseline logits (" + bag.id + ")");
    Var loss = classification_loss(out.logits, bag.label);
    if (!std::isfinite(loss.value()[0])) throw NumericError("non-finite loss on bag " + bag.id);
    t.backward(loss);
    auto params = s.model.parameters();
    s.optimizer.step(params, cosine_lr(s.config.adam.lr, s.step, s.total_steps));
    detail::zero_grads(params);
    ++s.step;
    return {loss.value()[0], class_probabilities(out.logits.value())};
}

// --- epoch loop ----------------------------------------------------------------

struct EpochRecord {
    std::size_t epoch = 0;
    double cls = 0.0;
    double con = 0.0;
    double total = 0.0;
    double lr = 0.0;
    double high_ratio = 0.0;
    double train_auc = 0.0;
};

inline constexpr const char* kHistoryCsvHeader = "epoch,L_cls,L_con,L,lr,beta_h_eff,train_auc";

/// Metric report from per-bag class probabilities (1 column for binary heads).
inline MetricReport evaluate_predictions(const std::vector<std::vector<double>>& probs,
                                         std::span<const std::size_t> labels,
                                         std::size_t num_classes) {
    std::vector<int> y(labels.begin(), labels.end());
    if (num_classes <= 2) {
        std::vector<double> s;
        for (const auto& p : probs) s.push_back(p.front());
        return optimal_threshold_metrics(s, y);
    }
    std::vector<double> flat;
    for (const auto& p : probs) flat.insert(flat.end(), p.begin(), p.end());
    return multiclass_metrics(flat, num_classes, y);
}

namespace detail {

inline void check_training_split(std::span<const Bag> bags) {
    if (bags.size() < 2) throw ConfigError("training needs at least two bags");
    for (const Bag& b : bags)
        if (b.label != bags.front().label) return;
    throw ConfigError("training split contains a single class");
}

inline double safe_train_auc(const std::vector<std::vector<double>>& probs,
                             std::span<const std::size_t> labels, std::size_t classes) {
    try {
        return evaluate_predictions(probs, labels, classes).auc;
    } catch (const UndefinedMetricError&) {
        return std::numeric_limits<double>::quiet_NaN();
    }
}

// Runs epochs of shuffled single-bag steps. `step(bag)` returns
// {cls, con, total, lr, ratio, probabilities}. Stops early on a training-loss plateau.
template <class StepFn>
std::vector<EpochRecord> run_epochs(std::span<const Bag> bags, const TrainConfig& cfg, StepFn step) {
    std::vector<EpochRecord> history;
    double best = std::numeric_limits<double>::infinity();
    std::size_t since_best = 0;
    std::vector<std::size_t> labels;
    for (const Bag& b : bags) labels.push_back(b.label);
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng shuffle_rng(cfg.seed, "shuffle", epoch);
        const auto order = sample_without_replacement(iota_range(0, bags.size()), bags.size(), shuffle_rng);
        EpochRecord rec;
        rec.epoch = epoch;
        std::vector<std::vector<double>> probs(bags.size());
        for (std::size_t k = 0; k < order.size(); ++k) {
            const Bag& bag = bags[order[k]];
            auto [loss, lr, ratio, p] = step(bag);
            if (k == 0) {
                rec.lr = lr;
                rec.high_ratio = ratio;
            }
            rec.cls += loss.cls;
            rec.con += loss.con;
            rec.total += loss.total;
            probs[order[k]] = std::move(p);
        }
        const double n = static_cast<double>(bags.size());
        rec.cls /= n;
        rec.con /= n;
        rec.total /= n;
        rec.train_auc = safe_train_auc(probs, labels, cfg.model.num_classes);
        history.push_back(rec);
        if (rec.total < best) {
            best = rec.total;
            since_best = 0;
        } else if (cfg.early_stopping && ++since_best >= cfg.patience) {
            break;
        }
    }
    return history;
}

struct StepSummary {
    LossReport loss;
    double lr;
    double ratio;
    std::vector<double> probabilities;
};

}  // namespace detail

/// Last mask plan seen for a training bag (diagnostics export).
struct RecordedPlan {
    MaskPlan plan;
    InstanceScores scores;
};

struct FitResult {
    SiameseState state;
    std::vector<EpochRecord> history;
    std::map<std::string, RecordedPlan> last_plans;
};

/**
 * Siamese training over `bags`: epochs of shuffled batch-size-1 steps with a
 * cosine-annealed learning rate and cosine-decayed high-score ratio over
 * epochs x bags steps.
 */
inline FitResult fit(std::span<const Bag> bags, const TrainConfig& cfg,
                     std::span<const NamedMatrix> pretrained = {}) {
    detail::check_training_split(bags);
    FitResult result{initialize(cfg, pretrained), {}, {}};
    SiameseState& s = result.state;
    s.total_steps = cfg.epochs * bags.size();
    result.history = detail::run_epochs(bags, cfg, [&](const Bag& bag) {
        Rng rng(cfg.seed, "mask", s.step);
        StepResult r = train_step(s, bag, rng);
        const double ratio = r.plan.high_ratio;
        result.last_plans[bag.id] = RecordedPlan{std::move(r.plan), std::move(r.scores)};
        return detail::StepSummary{r.loss, r.lr, ratio, std::move(r.probabilities)};
    });
    return result;
}

struct BaselineFitResult {
    MilModel model;
    std::vector<EpochRecord> history;
};

/// Trains the aggregator alone (no mining) with the same optimizer and schedule.
inline BaselineFitResult pretrain_baseline(std::span<const Bag> bags, const TrainConfig& cfg) {
    detail::check_training_split(bags);
    BaselineState s = initialize_baseline(cfg);
    s.total_steps = cfg.epochs * bags.size();
    auto history = detail::run_epochs(bags, cfg, [&](const Bag& bag) {
        const double lr = cosine_lr(cfg.adam.lr, s.step, s.total_steps);
        auto [loss, probs] = baseline_step(s, bag);
        return detail::StepSummary{LossReport{loss, 0.0, loss, 0.0, cfg.tau}, lr, 0.0, std::move(probs)};
    });
    return {std::move(s.model), std::move(history)};
}

// --- inference -------------------------------------------------------------------

struct InferResult {
    std::vector<double> probabilities;      // positive-class probability, or per-class
    std::vector<double> attention;          // N entries over input instances, sums to 1
    std::vector<double> instance_scores;    // class-aware instance probabilities

    double probability() const { return probabilities.front(); }
};

/**
 * Student-only inference on the full bag: Z~ = [proj(Z); GRN(proj(Z))] with
 * frozen queries. Consumes no randomness and mutates nothing.
 */
inline InferResult infer(Student& student, const Matrix& features) {
    if (features.rows() == 0) throw ContractError("infer: empty bag");
    Tape t(false);
    Var h = student.model.project(t, t.constant(features));
    Var recovered = grn_forward(t, student.queries, student.grn, h);
    BagOutput out = student.model.aggregate(t, assemble(h, recovered));
    const std::size_t n = features.rows();
    InferResult r;
    r.probabilities = class_probabilities(out.logits.value());
    std::vector<double> raw(out.attention.begin(), out.attention.begin() + static_cast<std::ptrdiff_t>(n));
    r.instance_scores = assess(raw, student.model.classifier(), h.value(), ScoreSource::instance_probability).values;
    const double total = std::accumulate(raw.begin(), raw.end(), 0.0);
    r.attention = raw;
    if (total > 0.0)
        for (double& a : r.attention) a /= total;
    return r;
}

inline std::string history_csv(std::span<const EpochRecord> history) {
    std::ostringstream os;
    os.precision(17);
    os << kHistoryCsvHeader << '\n';
    for (const EpochRecord& e : history)
        os << e.epoch << ',' << e.cls << ',' << e.con << ',' << e.total << ',' << e.lr << ','
           << e.high_ratio << ',' << e.train_auc << '\n';
    return os.str();
}

}  // namespace mhim
