#pragma once

#include <cmath>
#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

#include "msvit/embedding.hpp"
#include "msvit/netpbm.hpp"
#include "msvit/selective.hpp"
#include "msvit/tensor.hpp"

namespace msvit {

// Per-modality selection-frequency grids. Counts are integral after
// accumulate (f_i in [0, M]); batch means are real-valued.
struct FrequencyMap {
    std::size_t grid = 0;    // cells per side, (H/P)
    std::size_t blocks = 0;  // M
    std::vector<double> fundus;  // grid*grid, row-major
    std::vector<double> oct;
    std::vector<double> table;  // always M by construction, kept for completeness
};

// f_i = number of blocks whose selected set contains token i
inline FrequencyMap accumulate(const SelectionTrace& trace, const MmeConfig& cfg) {
    check(trace.n_image_tokens == cfg.image_tokens(), "accumulate: trace does not match config");
    FrequencyMap fm;
    fm.grid = cfg.grid();
    fm.blocks = trace.selected.size();
    fm.fundus.assign(cfg.tokens_per_image(), 0.0);
    fm.oct.assign(cfg.tokens_per_image(), 0.0);
    fm.table.assign(cfg.record_fields, static_cast<double>(fm.blocks));
    const auto freq = trace.frequencies();
    for (std::size_t i = 0; i < cfg.tokens_per_image(); ++i) {
        fm.fundus[i] = static_cast<double>(freq[i]);
        fm.oct[i] = static_cast<double>(freq[cfg.tokens_per_image() + i]);
    }
    return fm;
}

// frequently selected tokens appear whiter: pixel = round-half-up(255 f / M)
inline Image render(const std::vector<double>& cells, std::size_t grid, std::size_t blocks,
                    std::size_t scale_px) {
    check(cells.size() == grid * grid, "render: cell count does not match grid");
    check(blocks >= 1 && scale_px >= 1, "render: bad arguments");
    Image im = Image::zeros(1, grid * scale_px);
    for (std::size_t r = 0; r < grid; ++r)
        for (std::size_t c = 0; c < grid; ++c) {
            const double f = cells[r * grid + c];
            const double shade = std::floor(255.0 * f / static_cast<double>(blocks) + 0.5);
            const float v = static_cast<float>(std::min(255.0, std::max(0.0, shade)) / 255.0);
            for (std::size_t y = 0; y < scale_px; ++y)
                for (std::size_t x = 0; x < scale_px; ++x)
                    im.at(0, r * scale_px + y, c * scale_px + x) = v;
        }
    return im;
}

// writes <sample-id>.fundus.freq.pgm and <sample-id>.oct.freq.pgm
inline void save_frequency_maps(const FrequencyMap& fm, const std::string& sample_id,
                                const std::string& out_dir, std::size_t scale_px = 8) {
    namespace fs = std::filesystem;
    write_netpbm((fs::path(out_dir) / (sample_id + ".fundus.freq.pgm")).string(),
                 render(fm.fundus, fm.grid, fm.blocks, scale_px));
    write_netpbm((fs::path(out_dir) / (sample_id + ".oct.freq.pgm")).string(),
                 render(fm.oct, fm.grid, fm.blocks, scale_px));
}

// cellwise mean of per-sample maps
inline FrequencyMap batch_mean_map(const std::vector<FrequencyMap>& maps) {
    check(!maps.empty(), "batch_mean_map: no maps");
    FrequencyMap mean = maps[0];
    for (std::size_t k = 1; k < maps.size(); ++k) {
        check(maps[k].grid == mean.grid && maps[k].blocks == mean.blocks, "batch_mean_map: mixed shapes");
        for (std::size_t i = 0; i < mean.fundus.size(); ++i) mean.fundus[i] += maps[k].fundus[i];
        for (std::size_t i = 0; i < mean.oct.size(); ++i) mean.oct[i] += maps[k].oct[i];
        for (std::size_t i = 0; i < mean.table.size(); ++i) mean.table[i] += maps[k].table[i];
    }
    const double n = static_cast<double>(maps.size());
    for (auto& v : mean.fundus) v /= n;
    for (auto& v : mean.oct) v /= n;
    for (auto& v : mean.table) v /= n;
    return mean;
}

}  // namespace msvit
