#pragma once

#include <cstddef>
#include <vector>

#include "msvit/embedding.hpp"
#include "msvit/ops.hpp"
#include "msvit/params.hpp"
#include "msvit/tensor.hpp"

namespace msvit {

// Two binary gene classifiers plus the record-reconstruction MLP, all reading
// the same mean-pooled representation.
template <class T>
struct HeadParams {
    Tensor<T> arms2_w, arms2_b;
    Tensor<T> cfh_w, cfh_b;
    Tensor<T> rra_w1, rra_b1, rra_w2, rra_b2;

    static HeadParams init(std::size_t embed_dim, std::size_t record_fields, ParamStore<T>& store) {
        HeadParams p;
        p.arms2_w = store.param("head.arms2.w", {embed_dim, 2}, Init::XavierUniform);
        p.arms2_b = store.param("head.arms2.b", {2}, Init::Zero);
        p.cfh_w = store.param("head.cfh.w", {embed_dim, 2}, Init::XavierUniform);
        p.cfh_b = store.param("head.cfh.b", {2}, Init::Zero);
        p.rra_w1 = store.param("head.rra.w1", {embed_dim, embed_dim}, Init::XavierUniform);
        p.rra_b1 = store.param("head.rra.b1", {embed_dim}, Init::Zero);
        p.rra_w2 = store.param("head.rra.w2", {embed_dim, record_fields}, Init::XavierUniform);
        p.rra_b2 = store.param("head.rra.b2", {record_fields}, Init::Zero);
        return p;
    }
};

template <class T>
struct HeadOutput {
    Tensor<T> logits_arms2;  // [B,2]
    Tensor<T> logits_cfh;    // [B,2]
    Tensor<T> record_recon;  // [B,t]
};

// mean-pool one sample's tokens into the shared representation
template <class T>
Tensor<T> pool_tokens(const TokenSequence<T>& seq) {
    return mean_axis0(seq.tokens);
}

// pooled [B,D] -> classifier logits and record reconstruction
template <class T>
HeadOutput<T> head_forward(const Tensor<T>& pooled, const HeadParams<T>& p) {
    HeadOutput<T> out;
    out.logits_arms2 = affine(pooled, p.arms2_w, p.arms2_b);
    out.logits_cfh = affine(pooled, p.cfh_w, p.cfh_b);
    out.record_recon = mlp2(pooled, p.rra_w1, p.rra_b1, p.rra_w2, p.rra_b2, Act::Relu);
    return out;
}

template <class T>
HeadOutput<T> head_forward(const std::vector<TokenSequence<T>>& batch, const HeadParams<T>& p) {
    std::vector<Tensor<T>> pooled;
    pooled.reserve(batch.size());
    for (const auto& seq : batch) pooled.push_back(pool_tokens(seq));
    return head_forward(stack_rows(pooled), p);
}

template <class T>
struct LossBreakdown {
    Tensor<T> ce_arms2, ce_cfh, mse_record, total;
    T alpha = T(0);
};

// total = CE(arms2) + CE(cfh) + alpha * MSE(record reconstruction). The MSE
// term is always part of the graph so its gradient scales exactly with alpha.
template <class T>
LossBreakdown<T> total_loss(const HeadOutput<T>& out, const std::vector<int>& y_arms2,
                            const std::vector<int>& y_cfh, const Tensor<T>& record, T alpha) {
    check(alpha >= T(0), "total_loss: alpha must be >= 0");
    for (const int y : y_arms2) check(y == 0 || y == 1, "total_loss: arms2 label outside {0,1}");
    for (const int y : y_cfh) check(y == 0 || y == 1, "total_loss: cfh label outside {0,1}");
    LossBreakdown<T> lb;
    lb.alpha = alpha;
    lb.ce_arms2 = cross_entropy(out.logits_arms2, y_arms2);
    lb.ce_cfh = cross_entropy(out.logits_cfh, y_cfh);
    lb.mse_record = mse(out.record_recon, record);
    lb.total = add(add(lb.ce_arms2, lb.ce_cfh), scale(lb.mse_record, alpha));
    return lb;
}

}  // namespace msvit
