#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "msvit/model.hpp"
#include "support/oracles.hpp"
#include "support/reference_block.hpp"

using msvit::Tensor;
using D = Tensor<double>;

namespace {

D random_tensor(msvit::Shape shape, msvit::Rng& rng, bool rg = false, double scale = 1.0) {
    D t(shape, rg);
    for (auto& v : t.data()) v = rng.uniform(-scale, scale);
    return t;
}

msvit::ModelConfig tiny_config() {
    msvit::ModelConfig c;
    c.mme.image_size = 16;
    c.mme.patch_size = 8;
    c.mme.embed_dim = 8;
    c.mme.record_fields = 2;
    c.st.blocks = 2;
    c.st.heads = 2;
    c.st.embed_dim = 8;
    c.st.local_dim = 4;
    c.st.ffn_ratio = 2;
    c.st.selection_rate = 0.5;
    return c;
}

msvit::SampleInput<double> random_sample(const msvit::ModelConfig& c, msvit::Rng& rng) {
    msvit::SampleInput<double> s;
    const std::size_t H = c.mme.image_size;
    s.fundus.resize(3 * H * H);
    s.oct.resize(H * H);
    s.record.resize(c.mme.record_fields);
    for (auto& v : s.fundus) v = rng.uniform(0, 1);
    for (auto& v : s.oct) v = rng.uniform(0, 1);
    for (auto& v : s.record) v = rng.uniform(0, 1);
    return s;
}

// inverse of patchify, test-side only
D unpatchify(const D& patches, std::size_t C, std::size_t H, std::size_t W, std::size_t P) {
    D img({C, H, W});
    const std::size_t gw = W / P, width = C * P * P;
    for (std::size_t n = 0; n < patches.dim(0); ++n) {
        const std::size_t gy = n / gw, gx = n % gw;
        const double* row = patches.data().data() + n * width;
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t py = 0; py < P; ++py)
                for (std::size_t px = 0; px < P; ++px)
                    img[(c * H + gy * P + py) * W + gx * P + px] = *row++;
    }
    return img;
}

}  // namespace

TEST_SUITE("embedding") {
    TEST_CASE("patch counts") {
        msvit::Rng rng(1);
        D img = random_tensor({3, 48, 48}, rng);
        CHECK(msvit::patchify(img, 8).dim(0) == 36);
        D big = random_tensor({3, 288, 288}, rng);
        CHECK(msvit::patchify(big, 16).dim(0) == 324);
        msvit::MmeConfig cfg;
        cfg.image_size = 288;
        cfg.patch_size = 16;
        cfg.record_fields = 3;
        CHECK(cfg.image_tokens() == 648);
        CHECK(cfg.seq_len() == 651);
    }

    TEST_CASE("indivisible size raises config error") {
        msvit::MmeConfig cfg;
        cfg.image_size = 50;
        cfg.patch_size = 8;
        CHECK_THROWS_AS(cfg.validate(), msvit::ConfigError);
    }

    TEST_CASE("constant image gives identical patch rows") {
        D img = D::full({3, 16, 16}, 0.7);
        auto p = msvit::patchify(img, 8);
        for (std::size_t r = 1; r < p.dim(0); ++r)
            for (std::size_t j = 0; j < p.dim(1); ++j) CHECK(p[r * p.dim(1) + j] == p[j]);
    }

    TEST_CASE("patchify then unpatchify is identity") {
        msvit::Rng rng(2);
        for (int rep = 0; rep < 5; ++rep) {
            D img = random_tensor({3, 24, 24}, rng);
            auto back = unpatchify(msvit::patchify(img, 8), 3, 24, 24, 8);
            CHECK(back.data() == img.data());
        }
    }

    TEST_CASE("token count law over valid configs") {
        for (std::size_t hs : {16u, 32u, 48u, 64u})
            for (std::size_t ps : {8u, 16u})
                for (std::size_t t : {1u, 3u, 5u}) {
                    if (hs % ps) continue;
                    msvit::MmeConfig cfg;
                    cfg.image_size = hs;
                    cfg.patch_size = ps;
                    cfg.record_fields = t;
                    cfg.validate();
                    CHECK(cfg.seq_len() == 2 * (hs / ps) * (hs / ps) + t);
                }
    }

    TEST_CASE("zero image embeds to projection bias") {
        msvit::MmeConfig cfg;
        cfg.image_size = 16;
        cfg.patch_size = 8;
        cfg.embed_dim = 8;
        msvit::ParamStore<double> store;
        store.seed = 3;
        auto mme = msvit::MmeParams<double>::init(cfg, store);
        for (auto& v : mme.fundus_b.data()) v = 0.25;
        auto tokens = msvit::embed_fundus(msvit::patchify(D::zeros({3, 16, 16}), 8), mme);
        for (std::size_t i = 0; i < tokens.size(); ++i) CHECK(tokens[i] == 0.25);
    }

    TEST_CASE("fundus and oct projections are disjoint") {
        msvit::MmeConfig cfg;
        cfg.image_size = 16;
        cfg.patch_size = 8;
        cfg.embed_dim = 8;
        msvit::ParamStore<double> store;
        store.seed = 4;
        auto mme = msvit::MmeParams<double>::init(cfg, store);
        msvit::Rng rng(5);
        D oct_patches = random_tensor({4, cfg.oct_patch_dim()}, rng);
        auto before = msvit::embed_oct(oct_patches, mme).data();
        mme.fundus_w[0] += 10.0;
        auto after = msvit::embed_oct(oct_patches, mme).data();
        CHECK(before == after);
    }

    TEST_CASE("embedded token matches direct dot product") {
        msvit::MmeConfig cfg;
        cfg.image_size = 16;
        cfg.patch_size = 8;
        cfg.embed_dim = 8;
        msvit::ParamStore<double> store;
        store.seed = 6;
        auto mme = msvit::MmeParams<double>::init(cfg, store);
        msvit::Rng rng(7);
        D patch = random_tensor({1, cfg.fundus_patch_dim()}, rng);
        auto tok = msvit::embed_fundus(patch, mme);
        for (std::size_t j = 0; j < cfg.embed_dim; ++j) {
            double acc = mme.fundus_b[j];
            for (std::size_t k = 0; k < cfg.fundus_patch_dim(); ++k)
                acc += patch[k] * mme.fundus_w[k * cfg.embed_dim + j];
            CHECK(std::abs(tok[j] - acc) < 1e-9);
        }
    }

    TEST_CASE("table tokens: shape, zero record, attribute separation") {
        msvit::MmeConfig cfg;
        cfg.image_size = 16;
        cfg.patch_size = 8;
        cfg.embed_dim = 8;
        cfg.record_fields = 3;
        msvit::ParamStore<double> store;
        store.seed = 8;
        auto mme = msvit::MmeParams<double>::init(cfg, store);

        auto z = msvit::embed_table<double>({0.5, 1.0, 0.0}, mme);
        CHECK(z.shape() == msvit::Shape{3, 8});

        // zero biases are the default init, so a zero record embeds to zero
        auto z0 = msvit::embed_table<double>({0.0, 0.0, 0.0}, mme);
        for (std::size_t i = 0; i < z0.size(); ++i) CHECK(z0[i] == 0.0);

        auto za = msvit::embed_table<double>({0.5, 1.0, 0.0}, mme);
        auto zb = msvit::embed_table<double>({0.9, 1.0, 0.0}, mme);
        for (std::size_t j = 0; j < 8; ++j) {
            CHECK(za[8 + j] == zb[8 + j]);
            CHECK(za[16 + j] == zb[16 + j]);
        }
        CHECK_THROWS_AS(msvit::embed_table<double>({0.1}, mme), msvit::ShapeError);
    }

    TEST_CASE("assemble order, tags and length") {
        msvit::MmeConfig cfg;
        cfg.image_size = 48;
        cfg.patch_size = 8;
        cfg.embed_dim = 8;
        cfg.record_fields = 3;
        msvit::ParamStore<double> store;
        store.seed = 9;
        auto mme = msvit::MmeParams<double>::init(cfg, store);
        msvit::Rng rng(10);
        D zf = random_tensor({36, 8}, rng);
        D zo = random_tensor({36, 8}, rng);
        D zt = random_tensor({3, 8}, rng);

        auto seq = msvit::assemble(zf, zo, zt, mme.pos, cfg);
        CHECK(seq.tokens.dim(0) == 75);
        for (std::size_t i = 0; i < 36; ++i) CHECK(seq.tags[i] == msvit::Modality::Fundus);
        for (std::size_t i = 36; i < 72; ++i) CHECK(seq.tags[i] == msvit::Modality::Oct);
        for (std::size_t i = 72; i < 75; ++i) CHECK(seq.tags[i] == msvit::Modality::Table);
        CHECK(seq.coords[37].row == 0);
        CHECK(seq.coords[37].col == 1);

        // zero positional table makes assemble a pure concatenation
        D zero_pos = D::zeros({75, 8});
        auto seq2 = msvit::assemble(zf, zo, zt, zero_pos, cfg);
        for (std::size_t j = 0; j < 8; ++j) {
            CHECK(seq2.tokens[j] == zf[j]);
            CHECK(seq2.tokens[36 * 8 + j] == zo[j]);
            CHECK(seq2.tokens[72 * 8 + j] == zt[j]);
        }
    }

    TEST_CASE("modality separation: oct-only loss leaves fundus projection untouched") {
        msvit::MmeConfig cfg;
        cfg.image_size = 16;
        cfg.patch_size = 8;
        cfg.embed_dim = 8;
        cfg.record_fields = 2;
        msvit::ParamStore<double> store;
        store.seed = 11;
        auto mme = msvit::MmeParams<double>::init(cfg, store);
        msvit::Rng rng(12);
        D fimg = random_tensor({3, 16, 16}, rng);
        D oimg = random_tensor({1, 16, 16}, rng);
        auto seq = msvit::assemble(msvit::embed_fundus(msvit::patchify(fimg, 8), mme),
                                   msvit::embed_oct(msvit::patchify(oimg, 8), mme),
                                   msvit::embed_table<double>({0.5, 0.5}, mme), mme.pos, cfg);
        auto loss = msvit::sum_all(msvit::slice_rows(seq.tokens, 4, 8));  // oct rows only
        msvit::backward(loss);
        for (double g : mme.fundus_w.grad()) CHECK(g == 0.0);
        bool oct_nonzero = false;
        for (double g : mme.oct_w.grad()) oct_nonzero = oct_nonzero || g != 0.0;
        CHECK(oct_nonzero);
    }
}

TEST_SUITE("selective") {
    TEST_CASE("selection_count formula") {
        CHECK(msvit::selection_count(0.5, 72) == 36);
        CHECK(msvit::selection_count(1.0, 72) == 72);
        CHECK(msvit::selection_count(1e-9, 72) == 1);
        CHECK(msvit::selection_count(0.25, 10) == 3);  // round half up: 2.5 -> 3
    }

    TEST_CASE("selection scores: shape, equivariance, range") {
        msvit::StConfig cfg;
        cfg.embed_dim = 8;
        cfg.heads = 2;
        cfg.local_dim = 4;
        msvit::ParamStore<double> store;
        store.seed = 13;
        auto p = msvit::StBlockParams<double>::init(cfg, 0, store);
        msvit::Rng rng(14);

        D z = random_tensor({6, 8}, rng);
        auto probs = msvit::selection_scores(z, p);
        CHECK(probs.shape() == msvit::Shape{6});
        for (std::size_t i = 0; i < 6; ++i) {
            CHECK(probs[i] > 0.0);
            CHECK(probs[i] < 1.0);
        }

        D row = random_tensor({1, 8}, rng);
        std::vector<double> rep;
        for (int i = 0; i < 4; ++i) rep.insert(rep.end(), row.data().begin(), row.data().end());
        auto same = msvit::selection_scores(D::from({4, 8}, rep), p);
        for (std::size_t i = 1; i < 4; ++i) CHECK(same[i] == same[0]);
    }

    TEST_CASE("unselected rows pass through exactly") {
        auto cfg = tiny_config();
        msvit::MsvitModel<double> model(cfg, 15);
        msvit::Rng rng(16);
        auto sample = random_sample(cfg, rng);
        msvit::SelectionTrace trace;
        trace.n_image_tokens = cfg.mme.image_tokens();

        // reproduce the first block's attention sub-layer by hand
        D fimg = D::from({3, 16, 16}, sample.fundus);
        D oimg = D::from({1, 16, 16}, sample.oct);
        auto& mme = model.mme();
        auto seq = msvit::assemble(msvit::embed_fundus(msvit::patchify(fimg, 8), mme),
                                   msvit::embed_oct(msvit::patchify(oimg, 8), mme),
                                   msvit::embed_table(sample.record, mme), mme.pos, cfg.mme);
        auto u = msvit::layernorm(seq.tokens, model.blocks()[0].ln1_g, model.blocks()[0].ln1_b);
        auto probs = msvit::selection_scores(msvit::slice_rows(u, 0, 8), model.blocks()[0]);
        auto sel = msvit::select(probs, cfg.st.selection_rate);
        std::vector<std::size_t> participants = sel;
        for (std::size_t i = 8; i < 10; ++i) participants.push_back(i);
        auto delta = msvit::selective_attention(u, participants, model.blocks()[0], cfg.st.heads);
        std::vector<bool> in_sel(8, false);
        for (auto i : sel) in_sel[i] = true;
        for (std::size_t i = 0; i < 8; ++i)
            if (!in_sel[i])
                for (std::size_t j = 0; j < 8; ++j) CHECK(delta[i * 8 + j] == 0.0);
    }

    TEST_CASE("single participant attention is its value projection") {
        msvit::StConfig cfg;
        cfg.embed_dim = 8;
        cfg.heads = 2;
        cfg.local_dim = 4;
        msvit::ParamStore<double> store;
        store.seed = 17;
        auto p = msvit::StBlockParams<double>::init(cfg, 0, store);
        msvit::Rng rng(18);
        D z = random_tensor({1, 8}, rng);
        auto out = msvit::selective_attention(z, {0}, p, cfg.heads);

        // softmax over one token is 1, so the row reduces to (z Wv + bv) Wo + bo
        auto v = msvit::affine(z, p.wv, p.bv);
        auto expected = msvit::affine(v, p.wo, p.bo);
        for (std::size_t j = 0; j < 8; ++j) CHECK(out[j] == doctest::Approx(expected[j]).epsilon(1e-12));
    }

    TEST_CASE("local features: zeros branch and zero patches") {
        msvit::StConfig cfg;
        cfg.embed_dim = 8;
        cfg.heads = 2;
        cfg.local_dim = 4;
        msvit::ParamStore<double> store;
        store.seed = 19;
        auto p = msvit::StBlockParams<double>::init(cfg, 0, store);

        msvit::PatchBank<double> bank;
        bank.fundus = D::zeros({4, 3 * 8 * 8});
        bank.oct = D::zeros({4, 8 * 8});
        bank.patch = 8;

        auto none = msvit::local_features<double>({}, bank, p, 8, cfg.local_dim, true);
        CHECK(none.shape() == msvit::Shape{8, 4});
        for (std::size_t i = 0; i < none.size(); ++i) CHECK(none[i] == 0.0);

        // zero patches with zero conv bias stay zero through bn, relu and pooling
        auto feats = msvit::local_features<double>({0, 5}, bank, p, 8, cfg.local_dim, true);
        for (std::size_t i = 0; i < feats.size(); ++i) CHECK(feats[i] == 0.0);
    }

    TEST_CASE("local features match the naive pipeline oracle") {
        msvit::StConfig cfg;
        cfg.embed_dim = 8;
        cfg.heads = 2;
        cfg.local_dim = 4;
        msvit::ParamStore<double> store;
        store.seed = 20;
        auto p = msvit::StBlockParams<double>::init(cfg, 0, store);
        msvit::Rng rng(21);
        msvit::PatchBank<double> bank;
        bank.fundus = random_tensor({4, 3 * 8 * 8}, rng);
        bank.oct = random_tensor({4, 8 * 8}, rng);
        bank.patch = 8;

        std::vector<std::size_t> sel{0, 2, 3, 5, 6};  // fundus 0,2,3 and oct 1,2
        auto feats = msvit::local_features(sel, bank, p, 8, cfg.local_dim, true);

        std::vector<double> fpatches;
        for (std::size_t i : {0u, 2u, 3u})
            fpatches.insert(fpatches.end(), bank.fundus.data().begin() + i * 192,
                            bank.fundus.data().begin() + (i + 1) * 192);
        auto ref_f = oracle::ref_local_pipeline(fpatches, 3, 3, 8, p.fundus.kernel.data(), p.fundus.bias.data(),
                                                p.fundus.bn_g.data(), p.fundus.bn_b.data(), 4);
        std::vector<double> opatches;
        for (std::size_t i : {1u, 2u})
            opatches.insert(opatches.end(), bank.oct.data().begin() + i * 64,
                            bank.oct.data().begin() + (i + 1) * 64);
        auto ref_o = oracle::ref_local_pipeline(opatches, 2, 1, 8, p.oct.kernel.data(), p.oct.bias.data(),
                                                p.oct.bn_g.data(), p.oct.bn_b.data(), 4);

        const std::size_t rows_f[3] = {0, 2, 3};
        for (std::size_t i = 0; i < 3; ++i)
            for (std::size_t j = 0; j < 4; ++j)
                CHECK(std::abs(feats[rows_f[i] * 4 + j] - ref_f[i * 4 + j]) < 1e-9);
        const std::size_t rows_o[2] = {5, 6};
        for (std::size_t i = 0; i < 2; ++i)
            for (std::size_t j = 0; j < 4; ++j)
                CHECK(std::abs(feats[rows_o[i] * 4 + j] - ref_o[i * 4 + j]) < 1e-9);
        // unselected rows stay zero
        for (std::size_t j = 0; j < 4; ++j) {
            CHECK(feats[1 * 4 + j] == 0.0);
            CHECK(feats[4 * 4 + j] == 0.0);
            CHECK(feats[7 * 4 + j] == 0.0);
        }
    }

    TEST_CASE("fuse: zero local slot for table rows, constructed identity") {
        const std::size_t D_ = 4, Dl = 2, L = 5, t = 2;
        msvit::StConfig cfg;
        cfg.embed_dim = D_;
        cfg.heads = 2;
        cfg.local_dim = Dl;
        msvit::ParamStore<double> store;
        store.seed = 22;
        auto p = msvit::StBlockParams<double>::init(cfg, 0, store);

        // channel MLP with hidden [x;-x] layout: relu(x) - relu(-x) == x on
        // the global slice, zero on the local slice
        p.fuse_w1 = D::zeros({D_ + Dl, 2 * D_});
        p.fuse_b1 = D::zeros({2 * D_});
        p.fuse_w2 = D::zeros({2 * D_, D_});
        p.fuse_b2 = D::zeros({D_});
        for (std::size_t j = 0; j < D_; ++j) {
            p.fuse_w1[j * 2 * D_ + j] = 1.0;
            p.fuse_w1[j * 2 * D_ + D_ + j] = -1.0;
            p.fuse_w2[j * D_ + j] = 1.0;
            p.fuse_w2[(D_ + j) * D_ + j] = -1.0;
        }

        msvit::Rng rng(23);
        D z = random_tensor({L, D_}, rng);
        D local = D::zeros({L - t, Dl});
        auto fused = msvit::fuse(z, local, p, t);
        CHECK(fused.shape() == msvit::Shape{L, D_});
        for (std::size_t i = 0; i < fused.size(); ++i) CHECK(fused[i] == doctest::Approx(z[i]).epsilon(1e-12));
    }

    TEST_CASE("st_block: shape preserved, trace sizes, zero-weight identity") {
        auto cfg = tiny_config();
        msvit::MsvitModel<double> model(cfg, 24);
        msvit::Rng rng(25);
        auto sample = random_sample(cfg, rng);
        msvit::ForwardOptions opt;
        opt.collect_trace = true;
        msvit::SelectionTrace trace;
        auto seq = model.encode(sample, opt, &trace, nullptr);
        CHECK(seq.tokens.shape() == msvit::Shape{10, 8});
        CHECK(trace.selected.size() == cfg.st.blocks);
        const std::size_t k = msvit::selection_count(cfg.st.selection_rate, 8);
        for (const auto& s : trace.selected) CHECK(s.size() == k);

        // zero all block weights; the residual path alone makes it identity
        msvit::MsvitModel<double> zmodel(cfg, 26);
        for (auto& [name, param] : zmodel.params().params)
            if (name.rfind("st.0.", 0) == 0)
                for (auto& v : param.data()) v = 0.0;
        D z = random_tensor({10, 8}, rng);
        msvit::PatchBank<double> bank;
        bank.fundus = random_tensor({4, 192}, rng);
        bank.oct = random_tensor({4, 64}, rng);
        bank.patch = 8;
        msvit::StBlockOptions bopt;
        bopt.train = true;
        auto out = msvit::st_block(z, bank, zmodel.blocks()[0], cfg.st, 8, bopt, nullptr);
        for (std::size_t i = 0; i < z.size(); ++i) CHECK(out[i] == z[i]);
    }

    TEST_CASE("dense equivalence at full selection") {
        auto cfg = tiny_config();
        cfg.st.selection_rate = 1.0;
        cfg.st.gradient_coupling = false;
        msvit::MsvitModel<double> model(cfg, 27);
        msvit::Rng rng(28);

        D z = random_tensor({10, 8}, rng);
        msvit::PatchBank<double> bank;
        bank.fundus = random_tensor({4, 192}, rng);
        bank.oct = random_tensor({4, 64}, rng);
        bank.patch = 8;

        auto ref = oracle::ref_dense_block(z.data(), 10, 8, model.blocks()[0], cfg.st.heads, 8,
                                           bank.fundus.data(), bank.oct.data(), 8, 4);
        msvit::StBlockOptions bopt;
        bopt.train = true;
        bopt.gradient_coupling = false;
        auto out = msvit::st_block(z, bank, model.blocks()[0], cfg.st, 8, bopt, nullptr);
        for (std::size_t i = 0; i < out.size(); ++i) CHECK(std::abs(out[i] - ref[i]) < 1e-6);
    }

    TEST_CASE("gradient coupling: forward bit-identical, selection MLP learns") {
        auto cfg = tiny_config();
        msvit::MsvitModel<double> model(cfg, 29);
        msvit::Rng rng(30);
        auto sample = random_sample(cfg, rng);

        msvit::ForwardOptions opt;
        opt.train = false;
        model.config().st.gradient_coupling = true;
        auto on = model.forward({sample}, opt);
        model.config().st.gradient_coupling = false;
        auto off = model.forward({sample}, opt);
        CHECK(on.heads.logits_arms2.data() == off.heads.logits_arms2.data());
        CHECK(on.heads.logits_cfh.data() == off.heads.logits_cfh.data());

        const auto sel_grad_nonzero = [&](bool coupling) {
            model.config().st.gradient_coupling = coupling;
            model.params().zero_grad();
            auto res = model.forward({sample}, opt);
            auto lb = msvit::total_loss(res.heads, {1}, {0},
                                        D::from({1, 2}, {sample.record[0], sample.record[1]}), 0.001);
            msvit::backward(lb.total);
            bool nonzero = false;
            for (double g : model.blocks()[0].sel_w1.grad()) nonzero = nonzero || g != 0.0;
            return nonzero;
        };
        CHECK(sel_grad_nonzero(true));
        CHECK_FALSE(sel_grad_nonzero(false));
    }

    TEST_CASE("stack frequencies from forced traces") {
        auto cfg = tiny_config();
        cfg.st.blocks = 4;
        msvit::MsvitModel<double> model(cfg, 31);
        msvit::Rng rng(32);
        auto sample = random_sample(cfg, rng);

        msvit::SelectionTrace forced;
        forced.n_image_tokens = 8;
        forced.selected = {{0, 1, 2, 3}, {4, 5, 6, 7}, {0, 2, 4, 6}, {1, 2, 5, 7}};
        std::vector<msvit::SelectionTrace> forced_all{forced};
        msvit::ForwardOptions opt;
        opt.collect_trace = true;
        opt.forced = &forced_all;
        auto res = model.forward({sample}, opt);
        auto freq = res.traces[0].frequencies();
        CHECK(freq == std::vector<std::size_t>{2, 2, 3, 1, 2, 2, 2, 2});

        // full selection keeps every image token every block
        cfg.st.selection_rate = 1.0;
        msvit::MsvitModel<double> dense(cfg, 33);
        msvit::ForwardOptions opt2;
        opt2.collect_trace = true;
        auto res2 = dense.forward({sample}, opt2);
        for (const std::size_t f : res2.traces[0].frequencies()) CHECK(f == 4);
    }
}

TEST_SUITE("heads") {
    TEST_CASE("output shapes") {
        auto cfg = tiny_config();
        msvit::MsvitModel<double> model(cfg, 34);
        msvit::Rng rng(35);
        auto a = random_sample(cfg, rng);
        auto b = random_sample(cfg, rng);
        auto res = model.forward({a, b});
        CHECK(res.heads.logits_arms2.shape() == msvit::Shape{2, 2});
        CHECK(res.heads.logits_cfh.shape() == msvit::Shape{2, 2});
        CHECK(res.heads.record_recon.shape() == msvit::Shape{2, 2});
    }

    TEST_CASE("heads share the pooled representation but not weights") {
        auto cfg = tiny_config();
        msvit::MsvitModel<double> model(cfg, 36);
        msvit::Rng rng(37);
        auto s = random_sample(cfg, rng);
        auto before = model.forward({s});
        for (auto& v : model.head().arms2_w.data()) v = 0.0;
        for (auto& v : model.head().arms2_b.data()) v = 0.0;
        auto after = model.forward({s});
        CHECK(after.heads.logits_arms2[0] == 0.0);
        CHECK(after.heads.logits_arms2[1] == 0.0);
        CHECK(before.heads.logits_cfh.data() == after.heads.logits_cfh.data());
        CHECK(before.heads.record_recon.data() == after.heads.record_recon.data());
    }

    TEST_CASE("mean pooling of a constant sequence is that token") {
        msvit::Rng rng(38);
        D row = random_tensor({1, 8}, rng);
        std::vector<double> rep;
        for (int i = 0; i < 5; ++i) rep.insert(rep.end(), row.data().begin(), row.data().end());
        msvit::TokenSequence<double> seq;
        seq.tokens = D::from({5, 8}, rep);
        auto pooled = msvit::pool_tokens(seq);
        for (std::size_t j = 0; j < 8; ++j) CHECK(pooled[j] == doctest::Approx(row[j]).epsilon(1e-12));
    }

    TEST_CASE("loss composition arithmetic") {
        // logits chosen so the cross-entropy terms are exactly 1 and 2
        const double x1 = -std::log(std::exp(1.0) - 1.0);
        const double x2 = -std::log(std::exp(2.0) - 1.0);
        msvit::HeadOutput<double> out;
        out.logits_arms2 = D::from({1, 2}, {x1, 0.0});
        out.logits_cfh = D::from({1, 2}, {x2, 0.0});
        out.record_recon = D::from({1, 1}, {std::sqrt(3.0)});
        D record = D::zeros({1, 1});
        auto lb = msvit::total_loss(out, {0}, {0}, record, 0.001);
        CHECK(lb.ce_arms2[0] == doctest::Approx(1.0).epsilon(1e-9));
        CHECK(lb.ce_cfh[0] == doctest::Approx(2.0).epsilon(1e-9));
        CHECK(lb.mse_record[0] == doctest::Approx(3.0).epsilon(1e-9));
        CHECK(lb.total[0] == doctest::Approx(3.003).epsilon(1e-9));
        // exact composition, same floating point expression
        CHECK(lb.total[0] == lb.ce_arms2[0] + lb.ce_cfh[0] + 0.001 * lb.mse_record[0]);
    }

    TEST_CASE("labels outside {0,1} are rejected") {
        msvit::HeadOutput<double> out;
        out.logits_arms2 = D::zeros({1, 2});
        out.logits_cfh = D::zeros({1, 2});
        out.record_recon = D::zeros({1, 3});
        CHECK_THROWS_AS(msvit::total_loss(out, {2}, {0}, D::zeros({1, 3}), 0.001), msvit::ShapeError);
        CHECK_THROWS_AS(msvit::total_loss(out, {0}, {-1}, D::zeros({1, 3}), 0.001), msvit::ShapeError);
    }

    TEST_CASE("alpha scales reconstruction gradients linearly") {
        auto cfg = tiny_config();
        msvit::MsvitModel<double> model(cfg, 39);
        msvit::Rng rng(40);
        auto s = random_sample(cfg, rng);
        D record = D::from({1, 2}, {s.record[0], s.record[1]});

        const auto rra_grad = [&](double alpha) {
            model.params().zero_grad();
            auto res = model.forward({s});
            auto lb = msvit::total_loss(res.heads, {1}, {0}, record, alpha);
            msvit::backward(lb.total);
            return model.head().rra_w1.grad();
        };
        auto g0 = rra_grad(0.0);
        for (double g : g0) CHECK(g == 0.0);
        auto g1 = rra_grad(0.002);
        auto g2 = rra_grad(0.004);
        bool nonzero = false;
        for (std::size_t i = 0; i < g1.size(); ++i) {
            nonzero = nonzero || g1[i] != 0.0;
            CHECK(g2[i] == doctest::Approx(2.0 * g1[i]).epsilon(1e-9));
        }
        CHECK(nonzero);
    }

    TEST_CASE("total loss is permutation invariant over the batch") {
        auto cfg = tiny_config();
        msvit::MsvitModel<double> model(cfg, 41);
        msvit::Rng rng(42);
        auto a = random_sample(cfg, rng);
        auto b = random_sample(cfg, rng);
        auto c = random_sample(cfg, rng);
        D rec_abc = D::from({3, 2}, {a.record[0], a.record[1], b.record[0], b.record[1], c.record[0], c.record[1]});
        D rec_cba = D::from({3, 2}, {c.record[0], c.record[1], b.record[0], b.record[1], a.record[0], a.record[1]});
        auto r1 = model.forward({a, b, c});
        auto l1 = msvit::total_loss(r1.heads, {1, 0, 1}, {0, 0, 1}, rec_abc, 0.001);
        auto r2 = model.forward({c, b, a});
        auto l2 = msvit::total_loss(r2.heads, {1, 0, 1}, {1, 0, 0}, rec_cba, 0.001);
        CHECK(l1.total[0] == doctest::Approx(l2.total[0]).epsilon(1e-12));
    }
}

TEST_SUITE("full model") {
    TEST_CASE("forced selection replay reproduces the forward pass") {
        auto cfg = tiny_config();
        msvit::MsvitModel<double> model(cfg, 43);
        msvit::Rng rng(44);
        auto s = random_sample(cfg, rng);
        msvit::ForwardOptions opt;
        opt.collect_trace = true;
        auto free_run = model.forward({s}, opt);
        msvit::ForwardOptions replay;
        replay.forced = &free_run.traces;
        replay.collect_trace = true;
        auto forced_run = model.forward({s}, replay);
        CHECK(free_run.heads.logits_arms2.data() == forced_run.heads.logits_arms2.data());
        CHECK(free_run.traces[0].selected == forced_run.traces[0].selected);
    }

    TEST_CASE("end-to-end gradients match finite differences on frozen selections") {
        auto cfg = tiny_config();
        // coupling off: its ratio tensor deliberately routes gradient through a
        // detached denominator, which coordinate differencing cannot see
        cfg.st.gradient_coupling = false;
        msvit::MsvitModel<double> model(cfg, 45);
        msvit::Rng rng(46);
        std::vector<msvit::SampleInput<double>> batch{random_sample(cfg, rng), random_sample(cfg, rng)};
        D record = D::from({2, 2},
                           {batch[0].record[0], batch[0].record[1], batch[1].record[0], batch[1].record[1]});
        std::vector<int> ya{1, 0}, yc{0, 1};

        msvit::ForwardOptions probe;
        probe.train = true;
        probe.collect_trace = true;
        auto traces = model.forward(batch, probe).traces;

        msvit::ForwardOptions opt;
        opt.train = true;
        opt.forced = &traces;
        auto loss_fn = [&] {
            auto res = model.forward(batch, opt);
            return msvit::total_loss(res.heads, ya, yc, record, 0.001).total;
        };
        std::vector<D> leaves;
        for (auto& [name, t] : model.params().params) leaves.push_back(t);
        oracle::GradCheckOptions gopt;
        gopt.eps = 1e-6;
        gopt.rtol = 2e-2;
        gopt.atol = 1e-8;
        gopt.max_coords_per_leaf = 3;
        CHECK(oracle::count_grad_mismatches(leaves, loss_fn, gopt) == 0);
    }

    TEST_CASE("forward is deterministic") {
        auto cfg = tiny_config();
        auto run = [&] {
            msvit::MsvitModel<double> model(cfg, 47);
            msvit::Rng rng(48);
            auto s = random_sample(cfg, rng);
            return model.forward({s}).heads.logits_arms2.data();
        };
        CHECK(run() == run());
    }
}
