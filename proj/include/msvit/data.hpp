#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "msvit/netpbm.hpp"
#include "msvit/rng.hpp"
#include "msvit/tensor.hpp"

namespace msvit {

struct RawRecord {
    double age = 0;   // years
    int gender = 0;   // {0,1}
    int smoking = 0;  // {0,1}
};

// age/100 clamped to [0,1]; gender and smoking pass through
inline std::vector<double> normalize_record(const RawRecord& r) {
    const double age = std::clamp(r.age / 100.0, 0.0, 1.0);
    return {age, static_cast<double>(r.gender), static_cast<double>(r.smoking)};
}

// Standard cosine; a zero vector returns -inf so it can never win (or enter)
// donor matching.
inline double cosine_similarity(const std::vector<double>& a, const std::vector<double>& b) {
    double dot = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0.0 || nb == 0.0) return -std::numeric_limits<double>::infinity();
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

struct PatientSet {
    std::uint32_t id = 0;
    Image fundus;             // may be empty
    std::vector<Image> octs;  // 0..3 images
    RawRecord record;
    int arms2_alleles = 0;  // 0..2
    int cfh_alleles = 0;

    int label_arms2() const { return arms2_alleles == 2 ? 1 : 0; }
    int label_cfh() const { return cfh_alleles == 2 ? 1 : 0; }
    bool has_fundus() const { return !fundus.empty(); }
    bool has_oct() const { return !octs.empty(); }
};

enum class Provenance { Own, Borrowed, Pseudo };

struct ResolvedSample {
    std::uint32_t id = 0;
    Image fundus;  // always populated (possibly all-zero pseudo)
    Image oct;
    Provenance fundus_prov = Provenance::Pseudo;
    Provenance oct_prov = Provenance::Pseudo;
    std::uint32_t fundus_donor = 0;
    std::uint32_t oct_donor = 0;
    std::vector<double> record;  // normalized
    int label_arms2 = 0;
    int label_cfh = 0;
};

// A training-time donor pool. Built from training patients only; the optional
// instrumentation records every patient consulted so leakage tests can assert
// val/test ids never appear.
class TsiaPool {
public:
    TsiaPool() = default;
    explicit TsiaPool(std::vector<const PatientSet*> members) : members_(std::move(members)) {}

    std::size_t size() const { return members_.size(); }

    const PatientSet& at(std::size_t i) const {
        if (accessed_) accessed_->insert(members_[i]->id);
        return *members_[i];
    }

    void instrument(std::set<std::uint32_t>* sink) { accessed_ = sink; }

private:
    std::vector<const PatientSet*> members_;
    std::set<std::uint32_t>* accessed_ = nullptr;
};

namespace detail {

// equal-probability choice between the zero pseudo-image and one of the real
// images, uniform over the set
inline void pick_from_set(const std::vector<Image>& images, std::size_t image_size, Rng& rng, Image& out,
                          Provenance& prov, Provenance real_prov, std::size_t channels) {
    if (rng.bernoulli(0.5)) {
        out = Image::zeros(channels, image_size);
        prov = Provenance::Pseudo;
    } else {
        const auto pick = images.size() == 1
                              ? std::size_t{0}
                              : static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(images.size()) - 1));
        out = images[pick];
        prov = real_prov;
    }
}

// argmax cosine similarity over pool members with the same joint label pair
// and a nonempty image set of the wanted modality; ties by lowest id
inline const PatientSet* best_donor(const PatientSet& p, const TsiaPool& pool, bool want_oct) {
    const std::vector<double> target = normalize_record(p.record);
    const PatientSet* best = nullptr;
    double best_sim = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < pool.size(); ++i) {
        const PatientSet& cand = pool.at(i);
        if (cand.id == p.id) continue;
        if (cand.label_arms2() != p.label_arms2() || cand.label_cfh() != p.label_cfh()) continue;
        if (want_oct ? !cand.has_oct() : !cand.has_fundus()) continue;
        const double sim = cosine_similarity(target, normalize_record(cand.record));
        if (sim == -std::numeric_limits<double>::infinity()) continue;
        if (best == nullptr || sim > best_sim || (sim == best_sim && cand.id < best->id)) {
            best = &cand;
            best_sim = sim;
        }
    }
    return best;
}

}  // namespace detail

// Table-based similar-image augmentation, training-time resolution of one
// patient to exactly one fundus slot and one OCT slot.
inline ResolvedSample tsia_resolve(const PatientSet& p, const TsiaPool& pool, std::size_t image_size, Rng& rng) {
    ResolvedSample out;
    out.id = p.id;
    out.record = normalize_record(p.record);
    out.label_arms2 = p.label_arms2();
    out.label_cfh = p.label_cfh();

    // OCT slot
    if (p.has_oct()) {
        detail::pick_from_set(p.octs, image_size, rng, out.oct, out.oct_prov, Provenance::Own, 1);
    } else {
        const PatientSet* donor = detail::best_donor(p, pool, true);
        if (donor) {
            detail::pick_from_set(donor->octs, image_size, rng, out.oct, out.oct_prov, Provenance::Borrowed, 1);
            if (out.oct_prov == Provenance::Borrowed) out.oct_donor = donor->id;
        } else {
            out.oct = Image::zeros(1, image_size);
            out.oct_prov = Provenance::Pseudo;
        }
    }

    // fundus slot: used as-is when present, donor procedure when missing
    if (p.has_fundus()) {
        out.fundus = p.fundus;
        out.fundus_prov = Provenance::Own;
    } else {
        const PatientSet* donor = detail::best_donor(p, pool, false);
        if (donor) {
            std::vector<Image> set{donor->fundus};
            detail::pick_from_set(set, image_size, rng, out.fundus, out.fundus_prov, Provenance::Borrowed, 3);
            if (out.fundus_prov == Provenance::Borrowed) out.fundus_donor = donor->id;
        } else {
            out.fundus = Image::zeros(3, image_size);
            out.fundus_prov = Provenance::Pseudo;
        }
    }
    return out;
}

// Deterministic resolution without augmentation: own images (first OCT) or
// pseudo. Used for validation/test and for training when TSIA is disabled
// except that multiple own OCTs are sampled uniformly during training.
inline ResolvedSample resolve_plain(const PatientSet& p, std::size_t image_size, Rng* train_rng = nullptr) {
    ResolvedSample out;
    out.id = p.id;
    out.record = normalize_record(p.record);
    out.label_arms2 = p.label_arms2();
    out.label_cfh = p.label_cfh();
    if (p.has_fundus()) {
        out.fundus = p.fundus;
        out.fundus_prov = Provenance::Own;
    } else {
        out.fundus = Image::zeros(3, image_size);
    }
    if (p.has_oct()) {
        std::size_t pick = 0;
        if (train_rng && p.octs.size() > 1)
            pick = static_cast<std::size_t>(train_rng->uniform_int(0, static_cast<std::int64_t>(p.octs.size()) - 1));
        out.oct = p.octs[pick];
        out.oct_prov = Provenance::Own;
    } else {
        out.oct = Image::zeros(1, image_size);
    }
    return out;
}

enum class MaskMode { None, WithoutOct, WithoutFundus };

inline MaskMode mask_mode_from_string(const std::string& s) {
    if (s == "none") return MaskMode::None;
    if (s == "without_oct") return MaskMode::WithoutOct;
    if (s == "without_fundus") return MaskMode::WithoutFundus;
    throw ConfigError("unknown mask mode: " + s);
}

// ablation input masking: force the named modality slot to the pseudo-image
inline ResolvedSample mask_modality(ResolvedSample sample, MaskMode mode) {
    if (mode == MaskMode::WithoutOct) {
        sample.oct = Image::zeros(1, sample.oct.height);
        sample.oct_prov = Provenance::Pseudo;
        sample.oct_donor = 0;
    } else if (mode == MaskMode::WithoutFundus) {
        sample.fundus = Image::zeros(3, sample.fundus.height);
        sample.fundus_prov = Provenance::Pseudo;
        sample.fundus_donor = 0;
    }
    return sample;
}

inline void flip_horizontal(Image& im) {
    for (std::size_t c = 0; c < im.channels; ++c)
        for (std::size_t y = 0; y < im.height; ++y)
            for (std::size_t x = 0; x < im.width / 2; ++x)
                std::swap(im.at(c, y, x), im.at(c, y, im.width - 1 - x));
}

// the only train-time image augmentation: one coin per sample, flipping both
// modality slots together; the record is untouched
inline ResolvedSample augment_train(ResolvedSample sample, Rng& rng) {
    if (rng.bernoulli(0.5)) {
        flip_horizontal(sample.fundus);
        flip_horizontal(sample.oct);
    }
    return sample;
}

// ---------------------------------------------------------------------------
// on-disk dataset
// ---------------------------------------------------------------------------

struct Dataset {
    std::vector<PatientSet> patients;
    std::size_t image_size = 0;
};

// Manifest: one record per line, tab-separated:
//   id  fundus_path|-  oct_paths(comma list)|-  age  gender  smoking  arms2(0-2)  cfh(0-2)
// Paths are relative to the manifest's directory.
inline Dataset load_dataset(const std::string& manifest_path) {
    std::ifstream is(manifest_path);
    if (!is) throw IoError("cannot open manifest: " + manifest_path);
    const std::filesystem::path base = std::filesystem::path(manifest_path).parent_path();

    Dataset ds;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::vector<std::string> fields;
        std::stringstream ss(line);
        std::string f;
        while (std::getline(ss, f, '\t')) fields.push_back(f);
        if (fields.size() != 8)
            throw IoError("manifest line " + std::to_string(line_no) + ": expected 8 tab-separated fields, got " +
                          std::to_string(fields.size()));
        PatientSet p;
        try {
            p.id = static_cast<std::uint32_t>(std::stoul(fields[0]));
            p.record.age = std::stod(fields[3]);
            p.record.gender = std::stoi(fields[4]);
            p.record.smoking = std::stoi(fields[5]);
            p.arms2_alleles = std::stoi(fields[6]);
            p.cfh_alleles = std::stoi(fields[7]);
        } catch (const std::exception&) {
            throw IoError("manifest line " + std::to_string(line_no) + ": bad numeric field");
        }
        if (p.arms2_alleles < 0 || p.arms2_alleles > 2 || p.cfh_alleles < 0 || p.cfh_alleles > 2)
            throw IoError("manifest line " + std::to_string(line_no) + ": allele count outside 0..2");
        if (fields[1] != "-") p.fundus = read_netpbm((base / fields[1]).string());
        if (fields[2] != "-") {
            std::stringstream paths(fields[2]);
            std::string one;
            while (std::getline(paths, one, ',')) p.octs.push_back(read_netpbm((base / one).string()));
        }
        if (!p.has_fundus() && !p.has_oct())
            throw IoError("manifest line " + std::to_string(line_no) + ": patient has no image at all");
        const Image& probe = p.has_fundus() ? p.fundus : p.octs.front();
        if (probe.height != probe.width) throw IoError("non-square image for patient " + fields[0]);
        if (ds.image_size == 0) ds.image_size = probe.height;
        if (probe.height != ds.image_size)
            throw IoError("inconsistent image sizes in dataset: " + std::to_string(probe.height) + " vs " +
                          std::to_string(ds.image_size));
        ds.patients.push_back(std::move(p));
    }
    if (ds.patients.empty()) throw IoError("manifest is empty: " + manifest_path);
    return ds;
}

}  // namespace msvit
