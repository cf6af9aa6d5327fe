#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <future>
#include <map>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include "msvit/checkpoint.hpp"
#include "msvit/data.hpp"
#include "msvit/metrics.hpp"
#include "msvit/model.hpp"
#include "msvit/rng.hpp"

namespace msvit {

// lr(epoch) = 0.5 * base * (1 + cos(pi * epoch / epochs)), annealed to 0
inline double cosine_lr(std::size_t epoch, std::size_t epochs, double base_lr) {
    check(epochs >= 1, "cosine_lr: epochs must be >= 1");
    return 0.5 * base_lr *
           (1.0 + std::cos(3.14159265358979323846 * static_cast<double>(epoch) / static_cast<double>(epochs)));
}

// Adam with bias correction; walks parameters in name order so updates are
// deterministic.
template <class T>
struct Adam {
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    std::size_t steps = 0;
    std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> moments;

    void step(ParamStore<T>& store, double lr) {
        ++steps;
        const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(steps));
        const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(steps));
        for (auto& [name, param] : store.params) {
            auto& [m, v] = moments[name];
            if (m.empty()) {
                m.assign(param.size(), 0.0);
                v.assign(param.size(), 0.0);
            }
            const auto& g = param.grad();
            for (std::size_t i = 0; i < param.size(); ++i) {
                const double gi = static_cast<double>(g[i]);
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                const double update = lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps);
                param[i] = static_cast<T>(static_cast<double>(param[i]) - update);
            }
        }
    }
};

struct TrainConfig {
    std::size_t epochs = 200;
    double base_lr = 0.001;
    double alpha = 0.001;
    std::size_t batch_size = 16;
    std::uint64_t seed = 1;
    std::size_t folds = 5;  // how many of the 5 CV folds to run
    bool tsia = true;
    bool record_info = true;
    bool record_reconstruction = true;
    bool st_enabled = true;
    MaskMode mask_mode = MaskMode::None;
    bool parallel_folds = true;

    void validate() const {
        if (epochs < 1) throw ConfigError("epochs must be >= 1");
        if (base_lr <= 0) throw ConfigError("base_lr must be > 0");
        if (alpha < 0) throw ConfigError("alpha must be >= 0");
        if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
        if (folds < 1 || folds > 5) throw ConfigError("folds must be within 1..5");
    }
};

// five near-equal patient-level subsets, shuffled by seed
inline std::vector<std::vector<std::size_t>> make_fold_splits(std::size_t n_patients, std::uint64_t seed) {
    check(n_patients >= 5, "dataset too small for five-fold cross-validation");
    std::vector<std::size_t> order(n_patients);
    for (std::size_t i = 0; i < n_patients; ++i) order[i] = i;
    Rng rng(hash_stream(seed, "folds"));
    rng.shuffle(order);
    std::vector<std::vector<std::size_t>> splits(5);
    for (std::size_t i = 0; i < n_patients; ++i) splits[i % 5].push_back(order[i]);
    return splits;
}

namespace detail {

template <class T>
SampleInput<T> to_input(const ResolvedSample& s, bool record_info) {
    SampleInput<T> in;
    in.fundus.assign(s.fundus.pixels.begin(), s.fundus.pixels.end());
    in.oct.assign(s.oct.pixels.begin(), s.oct.pixels.end());
    in.record.resize(s.record.size());
    for (std::size_t i = 0; i < s.record.size(); ++i)
        in.record[i] = record_info ? static_cast<T>(s.record[i]) : T(0);
    return in;
}

}  // namespace detail

// deterministic, augmentation-free evaluation of a patient subset
template <class T>
FoldMetrics evaluate(MsvitModel<T>& model, const Dataset& ds, const std::vector<std::size_t>& idx,
                     const TrainConfig& cfg) {
    check(!idx.empty(), "evaluate: empty subset");
    NoGradGuard no_grad;
    std::vector<int> pred_a, pred_c, y_a, y_c;
    for (std::size_t start = 0; start < idx.size(); start += cfg.batch_size) {
        const std::size_t stop = std::min(idx.size(), start + cfg.batch_size);
        std::vector<SampleInput<T>> batch;
        for (std::size_t i = start; i < stop; ++i) {
            const PatientSet& p = ds.patients[idx[i]];
            ResolvedSample r = mask_modality(resolve_plain(p, ds.image_size), cfg.mask_mode);
            batch.push_back(detail::to_input<T>(r, cfg.record_info));
            y_a.push_back(p.label_arms2());
            y_c.push_back(p.label_cfh());
        }
        auto res = model.forward(batch);
        for (std::size_t b = 0; b < batch.size(); ++b) {
            pred_a.push_back(res.heads.logits_arms2[b * 2 + 1] > res.heads.logits_arms2[b * 2] ? 1 : 0);
            pred_c.push_back(res.heads.logits_cfh[b * 2 + 1] > res.heads.logits_cfh[b * 2] ? 1 : 0);
        }
    }
    FoldMetrics m;
    m.arms2 = compute_metrics(pred_a, y_a);
    m.cfh = compute_metrics(pred_c, y_c);
    return m;
}

template <class T>
struct FoldResult {
    FoldMetrics test;
    Checkpoint best_checkpoint;
    std::size_t best_epoch = 0;
    double best_val_accuracy = 0;
};

// Train on one patient-level split, select the epoch with the best validation
// mean accuracy over both genes, report test metrics from that snapshot.
template <class T>
FoldResult<T> run_fold(const Dataset& ds, const std::vector<std::size_t>& train_idx,
                       const std::vector<std::size_t>& val_idx, const std::vector<std::size_t>& test_idx,
                       const ModelConfig& mcfg_in, const TrainConfig& cfg, std::size_t fold_index) {
    cfg.validate();
    if (train_idx.empty() || val_idx.empty() || test_idx.empty())
        throw ConfigError("fold " + std::to_string(fold_index) + ": empty split");

    // patient-level disjointness is a hard invariant
    std::set<std::size_t> seen;
    for (const auto* split : {&train_idx, &val_idx, &test_idx})
        for (const std::size_t i : *split)
            check(seen.insert(i).second, "fold splits overlap at patient index " + std::to_string(i));
    check(seen.size() <= ds.patients.size(), "fold splits exceed dataset");

    ModelConfig mcfg = mcfg_in;
    mcfg.st_enabled = cfg.st_enabled;
    const std::uint64_t fold_seed = hash_stream(cfg.seed, "fold", fold_index);
    MsvitModel<T> model(mcfg, fold_seed);

    std::vector<const PatientSet*> pool_members;
    for (const std::size_t i : train_idx) pool_members.push_back(&ds.patients[i]);
    TsiaPool pool(pool_members);

    Rng shuffle_rng(hash_stream(fold_seed, "shuffle"));
    Rng resolve_rng(hash_stream(fold_seed, "resolve"));
    Rng flip_rng(hash_stream(fold_seed, "flip"));

    Adam<T> adam;
    FoldResult<T> result;
    double best_val = -1.0;
    std::map<std::string, std::vector<T>> best_snapshot;

    std::vector<std::size_t> order = train_idx;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double lr = cosine_lr(epoch, cfg.epochs, cfg.base_lr);
        shuffle_rng.shuffle(order);
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
            std::vector<SampleInput<T>> batch;
            std::vector<int> y_a, y_c;
            std::vector<T> record_target;
            for (std::size_t i = start; i < stop; ++i) {
                const PatientSet& p = ds.patients[order[i]];
                ResolvedSample r = cfg.tsia ? tsia_resolve(p, pool, ds.image_size, resolve_rng)
                                            : resolve_plain(p, ds.image_size, &resolve_rng);
                r = augment_train(mask_modality(std::move(r), cfg.mask_mode), flip_rng);
                batch.push_back(detail::to_input<T>(r, cfg.record_info));
                y_a.push_back(r.label_arms2);
                y_c.push_back(r.label_cfh);
                for (const double v : r.record)
                    record_target.push_back(cfg.record_info ? static_cast<T>(v) : T(0));
            }
            ForwardOptions opt;
            opt.train = true;
            auto res = model.forward(batch, opt);
            Tensor<T> target = Tensor<T>::from({batch.size(), mcfg.mme.record_fields}, record_target);
            const T alpha_eff = cfg.record_reconstruction && cfg.record_info ? static_cast<T>(cfg.alpha) : T(0);
            auto loss = total_loss(res.heads, y_a, y_c, target, alpha_eff);
            model.params().zero_grad();
            backward(loss.total);
            adam.step(model.params(), lr);
        }

        const FoldMetrics val = evaluate(model, ds, val_idx, cfg);
        if (val.mean_accuracy() > best_val) {
            best_val = val.mean_accuracy();
            best_snapshot = model.params().snapshot();
            result.best_epoch = epoch;
        }
    }

    model.params().restore(best_snapshot);
    result.best_val_accuracy = best_val;
    result.test = evaluate(model, ds, test_idx, cfg);
    result.best_checkpoint = checkpoint_from_store(model.params());
    return result;
}

// Standard rotation: test = fold f, validation = fold (f+1) % 5, train = rest.
struct FoldSplit {
    std::vector<std::size_t> train, val, test;
};

inline FoldSplit fold_split(const std::vector<std::vector<std::size_t>>& splits, std::size_t fold) {
    FoldSplit s;
    s.test = splits[fold];
    s.val = splits[(fold + 1) % 5];
    for (std::size_t j = 0; j < 5; ++j) {
        if (j == fold || j == (fold + 1) % 5) continue;
        s.train.insert(s.train.end(), splits[j].begin(), splits[j].end());
    }
    return s;
}

// Cross-validation over the first cfg.folds folds. Folds are independent and
// may run concurrently; results are ordered by fold index either way.
template <class T>
std::vector<FoldResult<T>> run_cv(const Dataset& ds, const ModelConfig& mcfg, const TrainConfig& cfg) {
    const auto splits = make_fold_splits(ds.patients.size(), cfg.seed);
    std::vector<FoldResult<T>> results(cfg.folds);
    if (cfg.parallel_folds && cfg.folds > 1) {
        std::vector<std::future<FoldResult<T>>> futures;
        for (std::size_t f = 0; f < cfg.folds; ++f)
            futures.push_back(std::async(std::launch::async, [&, f] {
                const FoldSplit s = fold_split(splits, f);
                return run_fold<T>(ds, s.train, s.val, s.test, mcfg, cfg, f);
            }));
        for (std::size_t f = 0; f < cfg.folds; ++f) results[f] = futures[f].get();
    } else {
        for (std::size_t f = 0; f < cfg.folds; ++f) {
            const FoldSplit s = fold_split(splits, f);
            results[f] = run_fold<T>(ds, s.train, s.val, s.test, mcfg, cfg, f);
        }
    }
    return results;
}

template <class T>
MetricsReport to_report(const std::vector<FoldResult<T>>& results) {
    MetricsReport report;
    for (const auto& r : results) report.folds.push_back(r.test);
    return report;
}

// ---------------------------------------------------------------------------
// ablation sweeps
// ---------------------------------------------------------------------------

enum class AblationAxis { SelectionRate, Tsia, Record, St, Mask };

inline AblationAxis ablation_axis_from_string(const std::string& s) {
    if (s == "selection_rate") return AblationAxis::SelectionRate;
    if (s == "tsia") return AblationAxis::Tsia;
    if (s == "record") return AblationAxis::Record;
    if (s == "st") return AblationAxis::St;
    if (s == "mask") return AblationAxis::Mask;
    throw ConfigError("unknown ablation axis: " + s);
}

struct SweepRow {
    std::string label;
    MetricsReport report;
};

template <class T>
std::vector<SweepRow> ablation_sweep(const Dataset& ds, const ModelConfig& mcfg, const TrainConfig& cfg,
                                     AblationAxis axis) {
    struct Arm {
        std::string label;
        ModelConfig m;
        TrainConfig t;
    };
    std::vector<Arm> arms;
    const auto add = [&](const std::string& label, auto mutate) {
        Arm arm{label, mcfg, cfg};
        mutate(arm.m, arm.t);
        arms.push_back(std::move(arm));
    };
    switch (axis) {
        case AblationAxis::SelectionRate:
            for (const double s : {0.25, 0.5, 0.75, 1.0}) {
                char label[16];
                std::snprintf(label, sizeof label, "s=%.2f", s);
                add(label, [s](ModelConfig& m, TrainConfig&) { m.st.selection_rate = s; });
            }
            break;
        case AblationAxis::Tsia:
            add("Without TSIA", [](ModelConfig&, TrainConfig& t) { t.tsia = false; });
            add("With TSIA", [](ModelConfig&, TrainConfig& t) { t.tsia = true; });
            break;
        case AblationAxis::Record:
            add("Without Information", [](ModelConfig&, TrainConfig& t) {
                t.record_info = false;
                t.record_reconstruction = false;
            });
            add("With Information", [](ModelConfig&, TrainConfig& t) {
                t.record_info = true;
                t.record_reconstruction = false;
            });
            add("+ Reconstruction", [](ModelConfig&, TrainConfig& t) {
                t.record_info = true;
                t.record_reconstruction = true;
            });
            break;
        case AblationAxis::St:
            add("Without ST", [](ModelConfig&, TrainConfig& t) { t.st_enabled = false; });
            add("With ST", [](ModelConfig&, TrainConfig& t) { t.st_enabled = true; });
            break;
        case AblationAxis::Mask:
            add("Proposed Method", [](ModelConfig&, TrainConfig& t) { t.mask_mode = MaskMode::None; });
            add("Without OCT", [](ModelConfig&, TrainConfig& t) { t.mask_mode = MaskMode::WithoutOct; });
            add("Without Fundus", [](ModelConfig&, TrainConfig& t) { t.mask_mode = MaskMode::WithoutFundus; });
            break;
    }
    std::vector<SweepRow> rows;
    for (const auto& arm : arms) {
        auto results = run_cv<T>(ds, arm.m, arm.t);
        rows.push_back({arm.label, to_report(results)});
    }
    return rows;
}

// ---------------------------------------------------------------------------
// report formatting (stable %.6f so repeated runs are byte-identical)
// ---------------------------------------------------------------------------

inline std::string format_metric(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

inline void write_gene_table(std::ostream& os, const std::string& gene,
                             const std::vector<std::pair<std::string, GeneMetrics>>& rows) {
    os << "# " << gene << "\n";
    os << "Method\tAccuracy\tPrecision\tRecall\tSpecificity\tF-score\n";
    for (const auto& [label, m] : rows)
        os << label << "\t" << format_metric(m.accuracy) << "\t" << format_metric(m.precision) << "\t"
           << format_metric(m.recall) << "\t" << format_metric(m.specificity) << "\t" << format_metric(m.f_score)
           << "\n";
}

inline void write_report_tables(std::ostream& os, const MetricsReport& report, const std::string& method_label) {
    for (const auto gene : {&FoldMetrics::arms2, &FoldMetrics::cfh}) {
        std::vector<std::pair<std::string, GeneMetrics>> rows;
        for (std::size_t f = 0; f < report.folds.size(); ++f)
            rows.push_back({method_label + " fold" + std::to_string(f), report.folds[f].*gene});
        rows.push_back({method_label + " mean", report.mean().*gene});
        write_gene_table(os, gene == &FoldMetrics::arms2 ? "ARMS2" : "CFH", rows);
        os << "\n";
    }
}

inline void write_report_kv(std::ostream& os, const MetricsReport& report, const std::string& prefix) {
    const auto emit = [&](const std::string& scope, const FoldMetrics& m) {
        const auto gene = [&](const std::string& name, const GeneMetrics& g) {
            os << prefix << scope << "." << name << ".accuracy = " << format_metric(g.accuracy) << "\n";
            os << prefix << scope << "." << name << ".precision = " << format_metric(g.precision) << "\n";
            os << prefix << scope << "." << name << ".recall = " << format_metric(g.recall) << "\n";
            os << prefix << scope << "." << name << ".specificity = " << format_metric(g.specificity) << "\n";
            os << prefix << scope << "." << name << ".f_score = " << format_metric(g.f_score) << "\n";
        };
        gene("arms2", m.arms2);
        gene("cfh", m.cfh);
    };
    for (std::size_t f = 0; f < report.folds.size(); ++f) emit("fold" + std::to_string(f), report.folds[f]);
    emit("mean", report.mean());
}

}  // namespace msvit
