#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "msvit/data.hpp"
#include "msvit/netpbm.hpp"
#include "msvit/rng.hpp"

namespace msvit {

// Synthetic surrogate dataset. Planted structure:
//   fundus: noisy background, K bright circular blobs whose count separates
//           the ARMS2 classes, one dark disc at a label-independent position
//   oct:    bright horizontal band whose thickness tracks the CFH label, with
//           speckle noise elsewhere
//   record: age shifted by CFH, smoking correlated with ARMS2, gender uniform
// Labels are exactly balanced per gene; OCT/fundus availability mirrors the
// clinical ratios (about 17% of sets hold 1-3 OCTs, about 1.7% lack fundus).
struct GeneratorConfig {
    std::size_t sets = 1192;
    std::size_t image_size = 48;
    std::uint64_t seed = 1;

    // availability ratios, kept as fractions of the set count
    double oct_fraction = 200.0 / 1192.0;
    double fundus_missing_fraction = 20.0 / 1192.0;
};

namespace detail {

struct Disc {
    double cy, cx, r;
};

inline bool cell_intersects(const Disc& d, std::size_t row, std::size_t col, std::size_t patch) {
    const double y0 = static_cast<double>(row * patch), y1 = static_cast<double>((row + 1) * patch) - 1.0;
    const double x0 = static_cast<double>(col * patch), x1 = static_cast<double>((col + 1) * patch) - 1.0;
    const double ny = std::clamp(d.cy, y0, y1);
    const double nx = std::clamp(d.cx, x0, x1);
    const double dy = ny - d.cy, dx = nx - d.cx;
    return dy * dy + dx * dx <= d.r * d.r;
}

inline void paint_disc(Image& im, const Disc& d, const float* color) {
    for (std::size_t y = 0; y < im.height; ++y)
        for (std::size_t x = 0; x < im.width; ++x) {
            const double dy = static_cast<double>(y) - d.cy, dx = static_cast<double>(x) - d.cx;
            if (dy * dy + dx * dx <= d.r * d.r)
                for (std::size_t c = 0; c < im.channels; ++c) im.at(c, y, x) = color[c];
        }
}

}  // namespace detail

struct SyntheticTruth {
    std::uint32_t id = 0;
    std::size_t blob_count = 0;
    std::vector<std::size_t> disc_cells;  // fundus patch-grid indices, row-major
    std::vector<std::size_t> blob_cells;
};

// Returns the truth table; everything else goes to disk. Byte-identical for a
// fixed config.
inline std::vector<SyntheticTruth> generate_synthetic(const GeneratorConfig& cfg, const std::string& out_dir,
                                                       std::size_t truth_patch = 8) {
    namespace fs = std::filesystem;
    const std::size_t n = cfg.sets, H = cfg.image_size;
    std::error_code ec;
    fs::create_directories(fs::path(out_dir) / "images", ec);
    if (ec) throw IoError("cannot create output directory: " + out_dir);

    Rng master(hash_stream(cfg.seed, "synthetic"));

    // exactly balanced, independent labels: equal quarters of each pair
    std::vector<std::pair<int, int>> labels(n);
    for (std::size_t i = 0; i < n; ++i) labels[i] = {static_cast<int>(i % 2), static_cast<int>((i / 2) % 2)};
    master.shuffle(labels);

    // OCT holders and (among them) the fundus-missing sets
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    master.shuffle(order);
    const std::size_t n_oct = static_cast<std::size_t>(std::llround(cfg.oct_fraction * static_cast<double>(n)));
    const std::size_t n_nofundus =
        std::min(n_oct, static_cast<std::size_t>(std::llround(cfg.fundus_missing_fraction * static_cast<double>(n))));
    std::vector<bool> has_oct(n, false), has_fundus(n, true);
    for (std::size_t i = 0; i < n_oct; ++i) has_oct[order[i]] = true;
    std::vector<std::size_t> holders(order.begin(), order.begin() + n_oct);
    master.shuffle(holders);
    for (std::size_t i = 0; i < n_nofundus; ++i) has_fundus[holders[i]] = false;

    std::ofstream manifest(fs::path(out_dir) / "manifest.tsv");
    std::ofstream truth_file(fs::path(out_dir) / "truth.tsv");
    if (!manifest || !truth_file) throw IoError("cannot write into: " + out_dir);

    std::vector<SyntheticTruth> truths;
    truths.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        Rng rng(hash_stream(cfg.seed, "patient", i));
        const int arms2 = labels[i].first, cfh = labels[i].second;
        SyntheticTruth truth;
        truth.id = static_cast<std::uint32_t>(i);

        // record: age separates CFH, smoking leans with ARMS2
        const double age = std::clamp(rng.normal(55.0 + 17.0 * cfh, 8.0), 30.0, 95.0);
        const int age_years = static_cast<int>(std::lround(age));
        const int gender = static_cast<int>(rng.uniform_int(0, 1));
        const int smoking = rng.bernoulli(arms2 ? 0.8 : 0.2) ? 1 : 0;
        const int arms2_alleles = arms2 ? 2 : static_cast<int>(rng.uniform_int(0, 1));
        const int cfh_alleles = cfh ? 2 : static_cast<int>(rng.uniform_int(0, 1));

        std::string fundus_field = "-";
        if (has_fundus[i]) {
            Image im;
            im.channels = 3;
            im.height = H;
            im.width = H;
            im.pixels.resize(3 * H * H);
            for (auto& v : im.pixels) v = static_cast<float>(rng.uniform(0.15, 0.35));

            // optic disc: dark, label-independent position
            const double disc_r = 5.0;
            detail::Disc disc;
            disc.r = disc_r;
            disc.cy = rng.uniform(disc_r, static_cast<double>(H) - 1.0 - disc_r);
            disc.cx = rng.uniform(disc_r, static_cast<double>(H) - 1.0 - disc_r);
            const float disc_color[3] = {0.04f, 0.04f, 0.04f};
            detail::paint_disc(im, disc, disc_color);

            // drusen blobs: count carries the ARMS2 label
            truth.blob_count = arms2 ? static_cast<std::size_t>(rng.uniform_int(4, 7))
                                     : static_cast<std::size_t>(rng.uniform_int(0, 2));
            std::vector<detail::Disc> blobs;
            for (std::size_t bidx = 0; bidx < truth.blob_count; ++bidx) {
                detail::Disc blob;
                blob.r = static_cast<double>(rng.uniform_int(2, 3));
                for (int attempt = 0; attempt < 64; ++attempt) {
                    blob.cy = rng.uniform(blob.r, static_cast<double>(H) - 1.0 - blob.r);
                    blob.cx = rng.uniform(blob.r, static_cast<double>(H) - 1.0 - blob.r);
                    const double dy = blob.cy - disc.cy, dx = blob.cx - disc.cx;
                    if (std::sqrt(dy * dy + dx * dx) > disc.r + blob.r + 2.0) break;
                }
                const float bright = static_cast<float>(rng.uniform(0.88, 0.98));
                const float blob_color[3] = {bright, bright * 0.92f, 0.55f};
                detail::paint_disc(im, blob, blob_color);
                blobs.push_back(blob);
            }

            const std::size_t grid = H / truth_patch;
            for (std::size_t r = 0; r < grid; ++r)
                for (std::size_t c = 0; c < grid; ++c) {
                    const std::size_t cell = r * grid + c;
                    if (detail::cell_intersects(disc, r, c, truth_patch)) truth.disc_cells.push_back(cell);
                    for (const auto& blob : blobs)
                        if (detail::cell_intersects(blob, r, c, truth_patch)) {
                            truth.blob_cells.push_back(cell);
                            break;
                        }
                }
            // a cell may touch both structures; keep it only as a blob cell
            for (const std::size_t cell : truth.blob_cells)
                truth.disc_cells.erase(std::remove(truth.disc_cells.begin(), truth.disc_cells.end(), cell),
                                       truth.disc_cells.end());

            const std::string name = "images/" + std::to_string(i) + "_fundus.ppm";
            write_netpbm((fs::path(out_dir) / name).string(), im);
            fundus_field = name;
        }

        std::string oct_field = "-";
        if (has_oct[i]) {
            const std::size_t count = static_cast<std::size_t>(rng.uniform_int(1, 3));
            std::string joined;
            for (std::size_t j = 0; j < count; ++j) {
                Image im = Image::zeros(1, H);
                for (auto& v : im.pixels) {
                    v = static_cast<float>(rng.uniform(0.0, 0.18));
                    if (rng.bernoulli(0.08)) v = static_cast<float>(rng.uniform(0.5, 0.9));  // speckle
                }
                // band thickness scales with image size: cfh=1 around H/4..H/3,
                // cfh=0 around H/16..H/8 (12..16 vs 3..6 rows at the 48px
                // default). Brightness is inversely tied to thickness so the
                // total bright mass is class-neutral: the label is in the
                // band's spatial extent, not in a mean-intensity shortcut.
                const std::size_t thick =
                    cfh ? static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(H / 4),
                                                                   static_cast<std::int64_t>(H / 3)))
                        : static_cast<std::size_t>(rng.uniform_int(std::max<std::int64_t>(1, static_cast<std::int64_t>(H / 16)),
                                                                   std::max<std::int64_t>(2, static_cast<std::int64_t>(H / 8))));
                const std::int64_t y_lo = 2;
                const std::int64_t y_hi = std::max(y_lo, static_cast<std::int64_t>(H - thick) - 2);
                const std::size_t y0 = static_cast<std::size_t>(rng.uniform_int(y_lo, y_hi));
                const double level =
                    std::clamp(4.2 * static_cast<double>(H) / 48.0 / static_cast<double>(thick), 0.28, 0.92);
                for (std::size_t y = y0; y < y0 + thick; ++y)
                    for (std::size_t x = 0; x < H; ++x)
                        im.at(0, y, x) = static_cast<float>(std::clamp(level + rng.uniform(-0.08, 0.08), 0.0, 1.0));
                const std::string name = "images/" + std::to_string(i) + "_oct" + std::to_string(j) + ".pgm";
                write_netpbm((fs::path(out_dir) / name).string(), im);
                if (j) joined += ",";
                joined += name;
            }
            oct_field = joined;
        }

        manifest << i << "\t" << fundus_field << "\t" << oct_field << "\t" << age_years << "\t" << gender << "\t"
                 << smoking << "\t" << arms2_alleles << "\t" << cfh_alleles << "\n";

        truth_file << i << "\t" << truth.blob_count << "\t";
        for (std::size_t j = 0; j < truth.disc_cells.size(); ++j)
            truth_file << (j ? "," : "") << truth.disc_cells[j];
        if (truth.disc_cells.empty()) truth_file << "-";
        truth_file << "\t";
        for (std::size_t j = 0; j < truth.blob_cells.size(); ++j)
            truth_file << (j ? "," : "") << truth.blob_cells[j];
        if (truth.blob_cells.empty()) truth_file << "-";
        truth_file << "\n";
        truths.push_back(std::move(truth));
    }
    if (!manifest || !truth_file) throw IoError("write failed in: " + out_dir);
    return truths;
}

inline std::vector<SyntheticTruth> load_truth(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open truth table: " + path);
    std::vector<SyntheticTruth> out;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string f;
        std::vector<std::string> fields;
        while (std::getline(ss, f, '\t')) fields.push_back(f);
        if (fields.size() != 4) throw IoError("bad truth line: " + line);
        SyntheticTruth t;
        t.id = static_cast<std::uint32_t>(std::stoul(fields[0]));
        t.blob_count = std::stoul(fields[1]);
        const auto parse_cells = [](const std::string& s, std::vector<std::size_t>& into) {
            if (s == "-") return;
            std::stringstream cs(s);
            std::string c;
            while (std::getline(cs, c, ',')) into.push_back(std::stoul(c));
        };
        parse_cells(fields[2], t.disc_cells);
        parse_cells(fields[3], t.blob_cells);
        out.push_back(std::move(t));
    }
    return out;
}

}  // namespace msvit
