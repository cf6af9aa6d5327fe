#pragma once

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "msvit/config.hpp"
#include "msvit/visualize.hpp"

namespace msvit {

// Training and evaluation run in single precision; checkpoints store the
// spec'd 64-bit payload either way (float values embed exactly).
using RunScalar = float;

namespace detail {

inline void write_effective_config(const RunConfig& cfg, const std::string& dir) {
    std::ofstream os(std::filesystem::path(dir) / "effective.cfg");
    if (!os) throw IoError("cannot write effective config into: " + dir);
    cfg.write(os);
}

inline void ensure_out_dir(const std::string& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create output directory: " + dir);
}

inline Dataset load_configured_dataset(const RunConfig& cfg) {
    if (cfg.dataset.empty()) throw ConfigError("no dataset configured (set 'dataset = <manifest path>')");
    Dataset ds = load_dataset(cfg.dataset);
    if (ds.image_size != cfg.image_size)
        throw ConfigError("dataset image size " + std::to_string(ds.image_size) +
                          " does not match configured image_size " + std::to_string(cfg.image_size));
    return ds;
}

}  // namespace detail

inline int cmd_generate(const RunConfig& cfg) {
    cfg.validate();
    detail::ensure_out_dir(cfg.out);
    generate_synthetic(cfg.generator_config(), cfg.out);
    detail::write_effective_config(cfg, cfg.out);
    std::cout << "generated " << cfg.sets << " sets under " << cfg.out << "\n";
    return 0;
}

inline int cmd_train(const RunConfig& cfg) {
    cfg.validate();
    Dataset ds = detail::load_configured_dataset(cfg);
    detail::ensure_out_dir(cfg.out);
    detail::write_effective_config(cfg, cfg.out);

    auto results = run_cv<RunScalar>(ds, cfg.model_config(), cfg.train_config());

    const std::filesystem::path out = cfg.out;
    const auto splits = make_fold_splits(ds.patients.size(), cfg.seed);
    {
        std::ofstream folds_file(out / "folds.tsv");
        for (std::size_t f = 0; f < splits.size(); ++f) {
            folds_file << f;
            for (const std::size_t i : splits[f]) folds_file << "\t" << ds.patients[i].id;
            folds_file << "\n";
        }
    }
    for (std::size_t f = 0; f < results.size(); ++f)
        save_checkpoint((out / ("fold" + std::to_string(f) + ".ckpt")).string(), results[f].best_checkpoint);

    const MetricsReport report = to_report(results);
    {
        std::ofstream tsv(out / "metrics.tsv");
        write_report_tables(tsv, report, "Proposed Method");
    }
    {
        std::ofstream kv(out / "metrics.kv");
        write_report_kv(kv, report, "train.");
        for (std::size_t f = 0; f < results.size(); ++f)
            kv << "train.fold" << f << ".best_epoch = " << results[f].best_epoch << "\n";
    }
    const FoldMetrics mean = report.mean();
    std::cout << "trained " << results.size() << " fold(s): mean test accuracy arms2 "
              << format_metric(mean.arms2.accuracy) << ", cfh " << format_metric(mean.cfh.accuracy) << "\n";
    return 0;
}

inline int cmd_eval(const RunConfig& cfg, const std::string& checkpoint_path, std::size_t fold) {
    cfg.validate();
    if (fold >= 5) throw ConfigError("fold index must be within 0..4");
    Dataset ds = detail::load_configured_dataset(cfg);

    MsvitModel<RunScalar> model(cfg.model_config(), 0);
    apply_checkpoint(load_checkpoint(checkpoint_path), model.params());

    const auto splits = make_fold_splits(ds.patients.size(), cfg.seed);
    const FoldSplit split = fold_split(splits, fold);
    const FoldMetrics m = evaluate(model, ds, split.test, cfg.train_config());

    detail::ensure_out_dir(cfg.out);
    MetricsReport report;
    report.folds = {m};
    std::ofstream kv(std::filesystem::path(cfg.out) / "eval_metrics.kv");
    write_report_kv(kv, report, "eval.");
    std::cout << "eval fold " << fold << ": accuracy arms2 " << format_metric(m.arms2.accuracy) << ", cfh "
              << format_metric(m.cfh.accuracy) << "\n";
    return 0;
}

inline int cmd_ablate(const RunConfig& cfg, const std::string& axis_name) {
    cfg.validate();
    const AblationAxis axis = ablation_axis_from_string(axis_name);
    Dataset ds = detail::load_configured_dataset(cfg);
    detail::ensure_out_dir(cfg.out);
    detail::write_effective_config(cfg, cfg.out);

    auto rows = ablation_sweep<RunScalar>(ds, cfg.model_config(), cfg.train_config(), axis);

    const std::filesystem::path out = cfg.out;
    std::ofstream tsv(out / ("ablate_" + axis_name + ".tsv"));
    for (const auto gene : {&FoldMetrics::arms2, &FoldMetrics::cfh}) {
        std::vector<std::pair<std::string, GeneMetrics>> table;
        for (const auto& row : rows) table.push_back({row.label, row.report.mean().*gene});
        write_gene_table(tsv, gene == &FoldMetrics::arms2 ? "ARMS2" : "CFH", table);
        tsv << "\n";
    }
    std::ofstream kv(out / ("ablate_" + axis_name + ".kv"));
    for (std::size_t r = 0; r < rows.size(); ++r)
        write_report_kv(kv, rows[r].report, "ablate.row" + std::to_string(r) + ".");
    std::cout << "ablation over " << axis_name << ": " << rows.size() << " rows written to " << cfg.out << "\n";
    return 0;
}

inline int cmd_visualize(const RunConfig& cfg, const std::string& checkpoint_path,
                         const std::vector<std::uint32_t>& ids) {
    cfg.validate();
    Dataset ds = detail::load_configured_dataset(cfg);
    MsvitModel<RunScalar> model(cfg.model_config(), 0);
    apply_checkpoint(load_checkpoint(checkpoint_path), model.params());
    detail::ensure_out_dir(cfg.out);

    std::vector<const PatientSet*> targets;
    if (ids.empty()) {
        for (const auto& p : ds.patients) targets.push_back(&p);
    } else {
        for (const std::uint32_t id : ids) {
            const PatientSet* found = nullptr;
            for (const auto& p : ds.patients)
                if (p.id == id) found = &p;
            if (!found) throw ConfigError("sample id " + std::to_string(id) + " not present in dataset");
            targets.push_back(found);
        }
    }

    NoGradGuard no_grad;
    const TrainConfig tcfg = cfg.train_config();
    for (const PatientSet* p : targets) {
        ResolvedSample r = mask_modality(resolve_plain(*p, ds.image_size), tcfg.mask_mode);
        ForwardOptions opt;
        opt.collect_trace = true;
        auto res = model.forward({detail::to_input<RunScalar>(r, tcfg.record_info)}, opt);
        const FrequencyMap fm = accumulate(res.traces[0], cfg.model_config().mme);
        save_frequency_maps(fm, std::to_string(p->id), cfg.out, cfg.scale_px);
    }
    std::cout << "wrote frequency maps for " << targets.size() << " sample(s) to " << cfg.out << "\n";
    return 0;
}

}  // namespace msvit
