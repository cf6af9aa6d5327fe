#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "msvit/ops.hpp"
#include "msvit/params.hpp"
#include "msvit/tensor.hpp"

namespace msvit {

enum class Modality { Fundus, Oct, Table };

struct PatchCoord {
    std::size_t row = 0;
    std::size_t col = 0;
};

// Multi-modal embedding geometry. Two image modalities share one square size
// and patch size; the record vector contributes `record_fields` extra tokens.
struct MmeConfig {
    std::size_t image_size = 48;
    std::size_t patch_size = 8;
    std::size_t embed_dim = 64;
    std::size_t record_fields = 3;
    static constexpr std::size_t fundus_channels = 3;
    static constexpr std::size_t oct_channels = 1;

    void validate() const {
        if (patch_size == 0 || image_size % patch_size != 0)
            throw ConfigError("image size " + std::to_string(image_size) + " is not divisible by patch size " +
                              std::to_string(patch_size));
        if (embed_dim % 2 != 0) throw ConfigError("embed_dim must be even");
        if (record_fields < 1) throw ConfigError("record_fields must be >= 1");
    }

    std::size_t grid() const { return image_size / patch_size; }
    std::size_t tokens_per_image() const { return grid() * grid(); }
    std::size_t image_tokens() const { return 2 * tokens_per_image(); }
    std::size_t seq_len() const { return image_tokens() + record_fields; }
    std::size_t fundus_patch_dim() const { return fundus_channels * patch_size * patch_size; }
    std::size_t oct_patch_dim() const { return oct_channels * patch_size * patch_size; }
};

// Embedded token sequence for one sample: image tokens ordered
// [fundus...; oct...; table...], with per-token modality tags and, for image
// tokens, the source patch grid position.
template <class T>
struct TokenSequence {
    Tensor<T> tokens;  // [L, D]
    std::vector<Modality> tags;
    std::vector<PatchCoord> coords;  // indexed like tags; table entries unused
};

// [C,H,W] -> [(H/P)^2, C*P*P]; patches in row-major grid order, each row
// flattened channel-major.
template <class T>
Tensor<T> patchify(const Tensor<T>& img, std::size_t P) {
    check(img.rank() == 3, "patchify: image must be [C,H,W], got " + shape_str(img.shape()));
    const std::size_t C = img.dim(0), H = img.dim(1), W = img.dim(2);
    check(P > 0 && H % P == 0 && W % P == 0,
          "patchify: size " + shape_str(img.shape()) + " not divisible by patch " + std::to_string(P));
    const std::size_t gh = H / P, gw = W / P, n = gh * gw, width = C * P * P;
    Tensor<T> out({n, width});
    for (std::size_t gy = 0; gy < gh; ++gy)
        for (std::size_t gx = 0; gx < gw; ++gx) {
            T* row = out.data().data() + (gy * gw + gx) * width;
            for (std::size_t c = 0; c < C; ++c)
                for (std::size_t py = 0; py < P; ++py)
                    for (std::size_t px = 0; px < P; ++px)
                        *row++ = img[(c * H + gy * P + py) * W + gx * P + px];
        }
    detail::attach<T>(out, {img}, [in = img.node(), C, H, W, P, gh, gw, width](TensorNode<T>& self) {
        in->ensure_grad();
        for (std::size_t gy = 0; gy < gh; ++gy)
            for (std::size_t gx = 0; gx < gw; ++gx) {
                const T* row = self.grad.data() + (gy * gw + gx) * width;
                for (std::size_t c = 0; c < C; ++c)
                    for (std::size_t py = 0; py < P; ++py)
                        for (std::size_t px = 0; px < P; ++px)
                            in->grad[(c * H + gy * P + py) * W + gx * P + px] += *row++;
            }
    });
    return out;
}

// Parameters of the multi-modal embedding: separate patch projections per
// image modality, one tiny MLP per record attribute, and a learned positional
// table covering the full concatenated sequence.
template <class T>
struct MmeParams {
    Tensor<T> fundus_w, fundus_b;
    Tensor<T> oct_w, oct_b;
    struct AttrMlp {
        Tensor<T> w1, b1, w2, b2;
    };
    std::vector<AttrMlp> table;
    Tensor<T> pos;

    static MmeParams init(const MmeConfig& cfg, ParamStore<T>& store) {
        MmeParams p;
        const std::size_t D = cfg.embed_dim;
        p.fundus_w = store.param("mme.fundus.w", {cfg.fundus_patch_dim(), D}, Init::XavierUniform);
        p.fundus_b = store.param("mme.fundus.b", {D}, Init::Zero);
        p.oct_w = store.param("mme.oct.w", {cfg.oct_patch_dim(), D}, Init::XavierUniform);
        p.oct_b = store.param("mme.oct.b", {D}, Init::Zero);
        for (std::size_t i = 0; i < cfg.record_fields; ++i) {
            const std::string base = "mme.table." + std::to_string(i);
            AttrMlp m;
            m.w1 = store.param(base + ".w1", {1, D}, Init::XavierUniform);
            m.b1 = store.param(base + ".b1", {D}, Init::Zero);
            m.w2 = store.param(base + ".w2", {D, D}, Init::XavierUniform);
            m.b2 = store.param(base + ".b2", {D}, Init::Zero);
            p.table.push_back(std::move(m));
        }
        p.pos = store.param("mme.pos", {cfg.seq_len(), cfg.embed_dim}, Init::Normal02);
        return p;
    }
};

template <class T>
Tensor<T> embed_fundus(const Tensor<T>& patches, const MmeParams<T>& p) {
    return affine(patches, p.fundus_w, p.fundus_b);
}

template <class T>
Tensor<T> embed_oct(const Tensor<T>& patches, const MmeParams<T>& p) {
    return affine(patches, p.oct_w, p.oct_b);
}

// record vector (already normalized to [0,1]) -> [t, D]; attribute i passes
// through its own 1 -> D -> D MLP
template <class T>
Tensor<T> embed_table(const std::vector<T>& record, const MmeParams<T>& p) {
    check(record.size() == p.table.size(), "embed_table: record has " + std::to_string(record.size()) +
                                               " fields, model expects " + std::to_string(p.table.size()));
    std::vector<Tensor<T>> rows;
    for (std::size_t i = 0; i < record.size(); ++i) {
        Tensor<T> x = Tensor<T>::from({1, 1}, {record[i]});
        rows.push_back(mlp2(x, p.table[i].w1, p.table[i].b1, p.table[i].w2, p.table[i].b2, Act::Relu));
    }
    return concat_rows(rows);
}

// concatenate [fundus; oct; table], add the positional table, fill tags and
// patch coordinates
template <class T>
TokenSequence<T> assemble(const Tensor<T>& z_fundus, const Tensor<T>& z_oct, const Tensor<T>& z_table,
                          const Tensor<T>& pos, const MmeConfig& cfg) {
    check(z_fundus.dim(0) == cfg.tokens_per_image() && z_oct.dim(0) == cfg.tokens_per_image() &&
              z_table.dim(0) == cfg.record_fields,
          "assemble: token counts do not match config");
    TokenSequence<T> seq;
    seq.tokens = add(concat_rows<T>({z_fundus, z_oct, z_table}), pos);
    const std::size_t g = cfg.grid();
    for (std::size_t i = 0; i < cfg.tokens_per_image(); ++i) {
        seq.tags.push_back(Modality::Fundus);
        seq.coords.push_back({i / g, i % g});
    }
    for (std::size_t i = 0; i < cfg.tokens_per_image(); ++i) {
        seq.tags.push_back(Modality::Oct);
        seq.coords.push_back({i / g, i % g});
    }
    for (std::size_t i = 0; i < cfg.record_fields; ++i) {
        seq.tags.push_back(Modality::Table);
        seq.coords.push_back({0, 0});
    }
    return seq;
}

}  // namespace msvit
