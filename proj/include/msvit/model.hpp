#pragma once

#include <cstdint>
#include <vector>

#include "msvit/embedding.hpp"
#include "msvit/heads.hpp"
#include "msvit/params.hpp"
#include "msvit/selective.hpp"
#include "msvit/tensor.hpp"

namespace msvit {

struct ModelConfig {
    MmeConfig mme;
    StConfig st;
    bool st_enabled = true;

    void validate() const {
        mme.validate();
        st.validate();
        if (st.embed_dim != mme.embed_dim) throw ConfigError("embedding and transformer dims differ");
    }
};

// One resolved sample as the model consumes it: exactly one fundus slot and
// one OCT slot (either may be an all-zero pseudo-image) plus the normalized
// record vector.
template <class T>
struct SampleInput {
    std::vector<T> fundus;  // 3*H*W
    std::vector<T> oct;     // H*W
    std::vector<T> record;  // t
};

struct ForwardOptions {
    bool train = false;
    bool collect_trace = false;
    const std::vector<SelectionTrace>* forced = nullptr;  // per-sample replay
};

template <class T>
struct ForwardResult {
    HeadOutput<T> heads;
    std::vector<SelectionTrace> traces;  // filled when collect_trace
};

template <class T>
class MsvitModel {
public:
    MsvitModel(ModelConfig cfg, std::uint64_t seed) : cfg_(cfg) {
        cfg_.validate();
        store_.seed = seed;
        mme_ = MmeParams<T>::init(cfg_.mme, store_);
        for (std::size_t m = 0; m < cfg_.st.blocks; ++m)
            blocks_.push_back(StBlockParams<T>::init(cfg_.st, m, store_));
        head_ = HeadParams<T>::init(cfg_.mme.embed_dim, cfg_.mme.record_fields, store_);
    }

    // full encoder for one sample; trace/forced may be null
    TokenSequence<T> encode(const SampleInput<T>& in, const ForwardOptions& opt, SelectionTrace* trace,
                            const SelectionTrace* forced) {
        const std::size_t H = cfg_.mme.image_size;
        check(in.fundus.size() == 3 * H * H, "sample fundus size does not match config");
        check(in.oct.size() == H * H, "sample oct size does not match config");

        Tensor<T> fundus_img = Tensor<T>::from({3, H, H}, in.fundus);
        Tensor<T> oct_img = Tensor<T>::from({1, H, H}, in.oct);
        PatchBank<T> bank;
        bank.fundus = patchify(fundus_img, cfg_.mme.patch_size);
        bank.oct = patchify(oct_img, cfg_.mme.patch_size);
        bank.patch = cfg_.mme.patch_size;

        Tensor<T> zf = embed_fundus(bank.fundus, mme_);
        Tensor<T> zo = embed_oct(bank.oct, mme_);
        Tensor<T> zt = embed_table(in.record, mme_);
        TokenSequence<T> seq = assemble(zf, zo, zt, mme_.pos, cfg_.mme);

        if (trace) trace->n_image_tokens = cfg_.mme.image_tokens();
        if (cfg_.st_enabled) {
            StBlockOptions bopt;
            bopt.train = opt.train;
            bopt.gradient_coupling = cfg_.st.gradient_coupling;
            seq.tokens = st_stack(seq.tokens, bank, blocks_, cfg_.st, cfg_.mme.image_tokens(), bopt, forced,
                                  trace);
        } else {
            // every image token participates in every dense block
            std::vector<std::size_t> all(cfg_.mme.image_tokens());
            for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
            for (std::size_t m = 0; m < blocks_.size(); ++m) {
                seq.tokens = dense_block(seq.tokens, blocks_[m], cfg_.st);
                if (trace) trace->selected.push_back(all);
            }
        }
        return seq;
    }

    ForwardResult<T> forward(const std::vector<SampleInput<T>>& batch, const ForwardOptions& opt = {}) {
        check(!batch.empty(), "forward: empty batch");
        ForwardResult<T> result;
        std::vector<Tensor<T>> pooled;
        pooled.reserve(batch.size());
        for (std::size_t i = 0; i < batch.size(); ++i) {
            SelectionTrace trace;
            const SelectionTrace* forced = opt.forced ? &(*opt.forced)[i] : nullptr;
            TokenSequence<T> seq = encode(batch[i], opt, opt.collect_trace ? &trace : nullptr, forced);
            pooled.push_back(pool_tokens(seq));
            if (opt.collect_trace) result.traces.push_back(std::move(trace));
        }
        result.heads = head_forward(stack_rows(pooled), head_);
        return result;
    }

    ModelConfig& config() { return cfg_; }
    const ModelConfig& config() const { return cfg_; }
    ParamStore<T>& params() { return store_; }
    const ParamStore<T>& params() const { return store_; }
    MmeParams<T>& mme() { return mme_; }
    std::vector<StBlockParams<T>>& blocks() { return blocks_; }
    HeadParams<T>& head() { return head_; }

private:
    ModelConfig cfg_;
    ParamStore<T> store_;
    MmeParams<T> mme_;
    std::vector<StBlockParams<T>> blocks_;
    HeadParams<T> head_;
};

}  // namespace msvit
