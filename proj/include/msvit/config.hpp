#pragma once

#include <fstream>
#include <ostream>
#include <sstream>
#include <string>

#include "msvit/data.hpp"
#include "msvit/model.hpp"
#include "msvit/synthetic.hpp"
#include "msvit/train.hpp"

namespace msvit {

// Flat `key = value` run configuration with `#` comments. Unknown keys are
// rejected; CLI flags override file values. The effective config (defaults
// applied) is written back into every output directory and re-loadable.
struct RunConfig {
    // model geometry
    std::size_t image_size = 48;
    std::size_t patch_size = 8;
    std::size_t embed_dim = 64;
    std::size_t record_fields = 3;
    std::size_t blocks = 4;
    std::size_t heads = 4;
    std::size_t local_dim = 32;
    std::size_t ffn_ratio = 2;
    double selection_rate = 0.5;
    bool gradient_coupling = true;

    // training protocol
    std::size_t epochs = 200;
    double base_lr = 0.001;
    double alpha = 0.001;
    std::size_t batch_size = 16;
    std::uint64_t seed = 1;
    std::size_t folds = 5;
    bool tsia = true;
    bool record_info = true;
    bool record_reconstruction = true;
    bool st_enabled = true;
    std::string mask_mode = "none";
    bool parallel_folds = true;

    // paths
    std::string dataset;
    std::string out = "out";

    // generator
    std::size_t sets = 1192;

    // visualization
    std::size_t scale_px = 8;

    void apply(const std::string& key, const std::string& value) {
        const auto to_size = [&](const std::string& v) -> std::size_t {
            try {
                std::size_t pos = 0;
                const unsigned long long parsed = std::stoull(v, &pos);
                if (pos != v.size()) throw std::invalid_argument(v);
                return static_cast<std::size_t>(parsed);
            } catch (const std::exception&) {
                throw ConfigError("config key '" + key + "': expected integer, got '" + v + "'");
            }
        };
        const auto to_double = [&](const std::string& v) -> double {
            try {
                std::size_t pos = 0;
                const double parsed = std::stod(v, &pos);
                if (pos != v.size()) throw std::invalid_argument(v);
                return parsed;
            } catch (const std::exception&) {
                throw ConfigError("config key '" + key + "': expected number, got '" + v + "'");
            }
        };
        const auto to_bool = [&](const std::string& v) -> bool {
            if (v == "true" || v == "1") return true;
            if (v == "false" || v == "0") return false;
            throw ConfigError("config key '" + key + "': expected true/false, got '" + v + "'");
        };

        if (key == "image_size") image_size = to_size(value);
        else if (key == "patch_size") patch_size = to_size(value);
        else if (key == "embed_dim") embed_dim = to_size(value);
        else if (key == "record_fields") record_fields = to_size(value);
        else if (key == "blocks") blocks = to_size(value);
        else if (key == "heads") heads = to_size(value);
        else if (key == "local_dim") local_dim = to_size(value);
        else if (key == "ffn_ratio") ffn_ratio = to_size(value);
        else if (key == "selection_rate") selection_rate = to_double(value);
        else if (key == "gradient_coupling") gradient_coupling = to_bool(value);
        else if (key == "epochs") epochs = to_size(value);
        else if (key == "base_lr") base_lr = to_double(value);
        else if (key == "alpha") alpha = to_double(value);
        else if (key == "batch_size") batch_size = to_size(value);
        else if (key == "seed") seed = to_size(value);
        else if (key == "folds") folds = to_size(value);
        else if (key == "tsia") tsia = to_bool(value);
        else if (key == "record_info") record_info = to_bool(value);
        else if (key == "record_reconstruction") record_reconstruction = to_bool(value);
        else if (key == "st_enabled") st_enabled = to_bool(value);
        else if (key == "mask_mode") mask_mode = value;
        else if (key == "parallel_folds") parallel_folds = to_bool(value);
        else if (key == "dataset") dataset = value;
        else if (key == "out") out = value;
        else if (key == "sets") sets = to_size(value);
        else if (key == "scale_px") scale_px = to_size(value);
        else throw ConfigError("unknown config key: " + key);
    }

    void validate() const {
        model_config().validate();
        train_config().validate();
        mask_mode_from_string(mask_mode);
        if (scale_px < 1) throw ConfigError("scale_px must be >= 1");
        if (sets < 5) throw ConfigError("sets must be >= 5");
    }

    ModelConfig model_config() const {
        ModelConfig m;
        m.mme.image_size = image_size;
        m.mme.patch_size = patch_size;
        m.mme.embed_dim = embed_dim;
        m.mme.record_fields = record_fields;
        m.st.blocks = blocks;
        m.st.heads = heads;
        m.st.embed_dim = embed_dim;
        m.st.local_dim = local_dim;
        m.st.ffn_ratio = ffn_ratio;
        m.st.selection_rate = selection_rate;
        m.st.gradient_coupling = gradient_coupling;
        m.st_enabled = st_enabled;
        return m;
    }

    TrainConfig train_config() const {
        TrainConfig t;
        t.epochs = epochs;
        t.base_lr = base_lr;
        t.alpha = alpha;
        t.batch_size = batch_size;
        t.seed = seed;
        t.folds = folds;
        t.tsia = tsia;
        t.record_info = record_info;
        t.record_reconstruction = record_reconstruction;
        t.st_enabled = st_enabled;
        t.mask_mode = mask_mode_from_string(mask_mode);
        t.parallel_folds = parallel_folds;
        return t;
    }

    GeneratorConfig generator_config() const {
        GeneratorConfig g;
        g.sets = sets;
        g.image_size = image_size;
        g.seed = seed;
        return g;
    }

    void write(std::ostream& os) const {
        os << "# effective configuration (defaults applied)\n";
        os << "image_size = " << image_size << "\n";
        os << "patch_size = " << patch_size << "\n";
        os << "embed_dim = " << embed_dim << "\n";
        os << "record_fields = " << record_fields << "\n";
        os << "blocks = " << blocks << "\n";
        os << "heads = " << heads << "\n";
        os << "local_dim = " << local_dim << "\n";
        os << "ffn_ratio = " << ffn_ratio << "\n";
        os << "selection_rate = " << format_metric(selection_rate) << "\n";
        os << "gradient_coupling = " << (gradient_coupling ? "true" : "false") << "\n";
        os << "epochs = " << epochs << "\n";
        os << "base_lr = " << format_metric(base_lr) << "\n";
        os << "alpha = " << format_metric(alpha) << "\n";
        os << "batch_size = " << batch_size << "\n";
        os << "seed = " << seed << "\n";
        os << "folds = " << folds << "\n";
        os << "tsia = " << (tsia ? "true" : "false") << "\n";
        os << "record_info = " << (record_info ? "true" : "false") << "\n";
        os << "record_reconstruction = " << (record_reconstruction ? "true" : "false") << "\n";
        os << "st_enabled = " << (st_enabled ? "true" : "false") << "\n";
        os << "mask_mode = " << mask_mode << "\n";
        os << "parallel_folds = " << (parallel_folds ? "true" : "false") << "\n";
        if (!dataset.empty()) os << "dataset = " << dataset << "\n";
        os << "out = " << out << "\n";
        os << "sets = " << sets << "\n";
        os << "scale_px = " << scale_px << "\n";
    }
};

namespace detail {

inline std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r");
    std::size_t b = s.find_last_not_of(" \t\r");
    return a == std::string::npos ? "" : s.substr(a, b - a + 1);
}

}  // namespace detail

inline void load_config_stream(std::istream& is, RunConfig& cfg) {
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        const std::size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(line_no) + ": expected 'key = value'");
        cfg.apply(detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
    }
}

inline RunConfig load_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open config file: " + path);
    RunConfig cfg;
    load_config_stream(is, cfg);
    return cfg;
}

}  // namespace msvit
