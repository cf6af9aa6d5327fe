#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "msvit/embedding.hpp"
#include "msvit/ops.hpp"
#include "msvit/params.hpp"
#include "msvit/tensor.hpp"

namespace msvit {

// Selective transformer stack configuration. selection_rate is the fraction
// of image tokens that take part in attention per block; table tokens always
// participate and are never scored.
struct StConfig {
    std::size_t blocks = 4;
    std::size_t heads = 4;
    std::size_t embed_dim = 64;
    std::size_t local_dim = 32;
    std::size_t ffn_ratio = 2;
    double selection_rate = 0.5;
    bool gradient_coupling = true;

    void validate() const {
        if (blocks < 1) throw ConfigError("blocks must be >= 1");
        if (heads < 1 || embed_dim % heads != 0)
            throw ConfigError("embed_dim " + std::to_string(embed_dim) + " not divisible by heads " +
                              std::to_string(heads));
        if (!(selection_rate > 0.0 && selection_rate <= 1.0))
            throw ConfigError("selection_rate must be in (0,1]");
        if (local_dim < 1) throw ConfigError("local_dim must be >= 1");
    }
};

// Which image tokens each block selected; drives both gradient flow and the
// frequency visualization.
struct SelectionTrace {
    std::size_t n_image_tokens = 0;
    std::vector<std::vector<std::size_t>> selected;  // per block, ascending

    std::vector<std::size_t> frequencies() const {
        std::vector<std::size_t> f(n_image_tokens, 0);
        for (const auto& block : selected)
            for (const std::size_t i : block) ++f[i];
        return f;
    }
};

// k = max(1, round(s * n_img))
inline std::size_t selection_count(double selection_rate, std::size_t n_image_tokens) {
    const auto k = static_cast<std::size_t>(std::llround(selection_rate * static_cast<double>(n_image_tokens)));
    return std::max<std::size_t>(1, std::min(k, n_image_tokens));
}

template <class T>
struct StBlockParams {
    Tensor<T> ln1_g, ln1_b;
    Tensor<T> sel_w1, sel_b1, sel_w2, sel_b2;
    Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;
    struct LocalCnn {
        Tensor<T> kernel, bias, bn_g, bn_b;
        Tensor<T> bn_mean, bn_var;  // running stats (buffers)
    };
    LocalCnn fundus, oct;
    Tensor<T> fuse_w1, fuse_b1, fuse_w2, fuse_b2;
    Tensor<T> ln2_g, ln2_b;
    Tensor<T> ffn_w1, ffn_b1, ffn_w2, ffn_b2;

    static StBlockParams init(const StConfig& cfg, std::size_t index, ParamStore<T>& store) {
        const std::size_t D = cfg.embed_dim, Dl = cfg.local_dim, F = D * cfg.ffn_ratio;
        const std::string b = "st." + std::to_string(index) + ".";
        StBlockParams p;
        p.ln1_g = store.param(b + "ln1.g", {D}, Init::One);
        p.ln1_b = store.param(b + "ln1.b", {D}, Init::Zero);
        p.sel_w1 = store.param(b + "sel.w1", {D, D}, Init::XavierUniform);
        p.sel_b1 = store.param(b + "sel.b1", {D}, Init::Zero);
        p.sel_w2 = store.param(b + "sel.w2", {D, 1}, Init::XavierUniform);
        p.sel_b2 = store.param(b + "sel.b2", {1}, Init::Zero);
        p.wq = store.param(b + "attn.wq", {D, D}, Init::XavierUniform);
        p.bq = store.param(b + "attn.bq", {D}, Init::Zero);
        p.wk = store.param(b + "attn.wk", {D, D}, Init::XavierUniform);
        p.bk = store.param(b + "attn.bk", {D}, Init::Zero);
        p.wv = store.param(b + "attn.wv", {D, D}, Init::XavierUniform);
        p.bv = store.param(b + "attn.bv", {D}, Init::Zero);
        p.wo = store.param(b + "attn.wo", {D, D}, Init::XavierUniform);
        p.bo = store.param(b + "attn.bo", {D}, Init::Zero);
        const auto cnn = [&](const std::string& name, std::size_t channels) {
            LocalCnn c;
            c.kernel = store.param(b + "local." + name + ".kernel", {Dl, channels, 3, 3}, Init::HeNormal);
            c.bias = store.param(b + "local." + name + ".bias", {Dl}, Init::Zero);
            c.bn_g = store.param(b + "local." + name + ".bn.g", {Dl}, Init::One);
            c.bn_b = store.param(b + "local." + name + ".bn.b", {Dl}, Init::Zero);
            c.bn_mean = store.buffer(b + "local." + name + ".bn.running_mean", {Dl}, T(0));
            c.bn_var = store.buffer(b + "local." + name + ".bn.running_var", {Dl}, T(1));
            return c;
        };
        p.fundus = cnn("fundus", MmeConfig::fundus_channels);
        p.oct = cnn("oct", MmeConfig::oct_channels);
        p.fuse_w1 = store.param(b + "fuse.w1", {D + Dl, D}, Init::XavierUniform);
        p.fuse_b1 = store.param(b + "fuse.b1", {D}, Init::Zero);
        p.fuse_w2 = store.param(b + "fuse.w2", {D, D}, Init::XavierUniform);
        p.fuse_b2 = store.param(b + "fuse.b2", {D}, Init::Zero);
        p.ln2_g = store.param(b + "ln2.g", {D}, Init::One);
        p.ln2_b = store.param(b + "ln2.b", {D}, Init::Zero);
        p.ffn_w1 = store.param(b + "ffn.w1", {D, F}, Init::XavierUniform);
        p.ffn_b1 = store.param(b + "ffn.b1", {F}, Init::Zero);
        p.ffn_w2 = store.param(b + "ffn.w2", {F, D}, Init::XavierUniform);
        p.ffn_b2 = store.param(b + "ffn.b2", {D}, Init::Zero);
        return p;
    }
};

// Per-token selection probabilities for the incoming image tokens:
// 2-layer MLP then sigmoid, strictly inside (0,1).
template <class T>
Tensor<T> selection_scores(const Tensor<T>& z_img, const StBlockParams<T>& p) {
    auto s = mlp2(z_img, p.sel_w1, p.sel_b1, p.sel_w2, p.sel_b2, Act::Relu);  // [N,1]
    return reshape(sigmoid(s), {z_img.dim(0)});
}

// top-k over probability values; ties by lower index, result ascending
template <class T>
std::vector<std::size_t> select(const Tensor<T>& probs, double selection_rate) {
    return top_k_indices(probs.data(), selection_count(selection_rate, probs.dim(0)));
}

// Multi-head attention restricted to `participants`. Rows outside the set are
// exactly zero in the returned delta, so residual addition passes them
// through unchanged. `value_scale`, when defined, multiplies participant
// value rows (forward-neutral gradient coupling).
template <class T>
Tensor<T> selective_attention(const Tensor<T>& z, const std::vector<std::size_t>& participants,
                              const StBlockParams<T>& p, std::size_t heads, const Tensor<T>& value_scale = {}) {
    const std::size_t L = z.dim(0), D = z.dim(1), dk = D / heads;
    Tensor<T> u = gather_rows(z, participants);
    Tensor<T> q = affine(u, p.wq, p.bq);
    Tensor<T> k = affine(u, p.wk, p.bk);
    Tensor<T> v = affine(u, p.wv, p.bv);
    if (value_scale.defined()) v = mul_rows(v, value_scale);
    const T inv_sqrt_dk = T(1) / std::sqrt(static_cast<T>(dk));
    Tensor<T> merged;
    for (std::size_t h = 0; h < heads; ++h) {
        Tensor<T> qh = slice_cols(q, h * dk, (h + 1) * dk);
        Tensor<T> kh = slice_cols(k, h * dk, (h + 1) * dk);
        Tensor<T> vh = slice_cols(v, h * dk, (h + 1) * dk);
        Tensor<T> attn = softmax(scale(matmul_nt(qh, kh), inv_sqrt_dk), 1);
        Tensor<T> oh = matmul(attn, vh);
        merged = h == 0 ? oh : concat_cols(merged, oh);
    }
    return scatter_rows(affine(merged, p.wo, p.bo), participants, L);
}

// Original image patches both modalities were embedded from; local CNN input.
template <class T>
struct PatchBank {
    Tensor<T> fundus;  // [(H/P)^2, 3*P*P], no grad
    Tensor<T> oct;     // [(H/P)^2, P*P]
    std::size_t patch = 0;
};

// Dense CNN features for the selected tokens' source patches; unselected rows
// are exactly zero. One CNN per modality (channel counts differ).
template <class T>
Tensor<T> local_features(const std::vector<std::size_t>& sel, const PatchBank<T>& bank, StBlockParams<T>& p,
                         std::size_t n_image_tokens, std::size_t local_dim, bool train) {
    const std::size_t per_modality = bank.fundus.dim(0);
    std::vector<std::size_t> rows_f, rows_o, patch_f, patch_o;
    for (const std::size_t i : sel) {
        if (i < per_modality) {
            rows_f.push_back(i);
            patch_f.push_back(i);
        } else {
            rows_o.push_back(i);
            patch_o.push_back(i - per_modality);
        }
    }
    const auto run = [&](const Tensor<T>& patches, const std::vector<std::size_t>& take, std::size_t channels,
                         typename StBlockParams<T>::LocalCnn& cnn) {
        Tensor<T> x = gather_rows(patches, take);
        x = reshape(x, {take.size(), channels, bank.patch, bank.patch});
        Tensor<T> y = conv3x3(x, cnn.kernel, cnn.bias);
        y = batchnorm(y, cnn.bn_g, cnn.bn_b, cnn.bn_mean, cnn.bn_var, train);
        return global_avg_pool(relu(y));  // [n, local_dim]
    };
    Tensor<T> out;
    if (!rows_f.empty())
        out = scatter_rows(run(bank.fundus, patch_f, MmeConfig::fundus_channels, p.fundus), rows_f,
                           n_image_tokens);
    if (!rows_o.empty()) {
        Tensor<T> o = scatter_rows(run(bank.oct, patch_o, MmeConfig::oct_channels, p.oct), rows_o, n_image_tokens);
        out = out.defined() ? add(out, o) : o;
    }
    if (!out.defined()) out = Tensor<T>::zeros({n_image_tokens, local_dim});
    return out;
}

// [global ; local] -> shared two-layer channel MLP back to D. Table tokens'
// local slot is zero-padded.
template <class T>
Tensor<T> fuse(const Tensor<T>& z, const Tensor<T>& z_local, const StBlockParams<T>& p,
               std::size_t record_fields) {
    Tensor<T> local_padded =
        record_fields > 0
            ? concat_rows<T>({z_local, Tensor<T>::zeros({record_fields, z_local.dim(1)})})
            : z_local;
    return mlp2(concat_cols(z, local_padded), p.fuse_w1, p.fuse_b1, p.fuse_w2, p.fuse_b2, Act::Relu);
}

struct StBlockOptions {
    bool train = false;
    bool gradient_coupling = true;
    const std::vector<std::size_t>* forced_selection = nullptr;  // replay support
};

// One selective transformer block:
//   pre-LN -> scores -> top-k -> selective attention (+residual)
//   -> local CNN features + channel fuse (+residual)
//   -> pre-LN -> feed-forward MLP (+residual)
template <class T>
Tensor<T> st_block(const Tensor<T>& z, const PatchBank<T>& bank, StBlockParams<T>& p, const StConfig& cfg,
                   std::size_t n_image_tokens, const StBlockOptions& opt, SelectionTrace* trace) {
    const std::size_t L = z.dim(0);
    const std::size_t table = L - n_image_tokens;

    Tensor<T> u = layernorm(z, p.ln1_g, p.ln1_b);
    Tensor<T> probs = selection_scores(slice_rows(u, 0, n_image_tokens), p);
    std::vector<std::size_t> sel =
        opt.forced_selection ? *opt.forced_selection : select(probs, cfg.selection_rate);
    if (trace) trace->selected.push_back(sel);

    std::vector<std::size_t> participants = sel;
    for (std::size_t i = n_image_tokens; i < L; ++i) participants.push_back(i);

    Tensor<T> value_scale;
    if (opt.gradient_coupling) {
        // p_i / detach(p_i): forward value exactly 1 (IEEE x/x), gradient
        // flows into the selection MLP for participating image tokens
        Tensor<T> p_sel = gather_rows(probs, sel);
        Tensor<T> ratio = div(p_sel, p_sel.detach());
        value_scale = table > 0 ? concat_rows<T>({ratio, Tensor<T>::full({table}, T(1))}) : ratio;
    }

    Tensor<T> out = add(z, selective_attention(u, participants, p, cfg.heads, value_scale));
    Tensor<T> local = local_features(sel, bank, p, n_image_tokens, cfg.local_dim, opt.train);
    out = add(out, fuse(out, local, p, table));
    out = add(out, mlp2(layernorm(out, p.ln2_g, p.ln2_b), p.ffn_w1, p.ffn_b1, p.ffn_w2, p.ffn_b2, Act::Gelu));
    return out;
}

// M blocks applied sequentially, accumulating the selection trace.
template <class T>
Tensor<T> st_stack(Tensor<T> z, const PatchBank<T>& bank, std::vector<StBlockParams<T>>& blocks,
                   const StConfig& cfg, std::size_t n_image_tokens, const StBlockOptions& base,
                   const SelectionTrace* forced, SelectionTrace* trace) {
    for (std::size_t m = 0; m < blocks.size(); ++m) {
        StBlockOptions opt = base;
        opt.forced_selection = forced ? &forced->selected[m] : nullptr;
        z = st_block(z, bank, blocks[m], cfg, n_image_tokens, opt, trace);
    }
    return z;
}

// Plain dense transformer block over all tokens; the "without ST" ablation
// path (no selection, no local features).
template <class T>
Tensor<T> dense_block(const Tensor<T>& z, StBlockParams<T>& p, const StConfig& cfg) {
    const std::size_t L = z.dim(0);
    std::vector<std::size_t> all(L);
    for (std::size_t i = 0; i < L; ++i) all[i] = i;
    Tensor<T> u = layernorm(z, p.ln1_g, p.ln1_b);
    Tensor<T> out = add(z, selective_attention(u, all, p, cfg.heads));
    out = add(out, mlp2(layernorm(out, p.ln2_g, p.ln2_b), p.ffn_w1, p.ffn_b1, p.ffn_w2, p.ffn_b2, Act::Gelu));
    return out;
}

}  // namespace msvit
