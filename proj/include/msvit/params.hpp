#pragma once

#include <cmath>
#include <map>
#include <string>

#include "msvit/rng.hpp"
#include "msvit/tensor.hpp"

namespace msvit {

enum class Init { Zero, One, XavierUniform, HeNormal, Normal02 };

// Named parameters and state buffers of one model. Names are unique dotted
// paths; map ordering fixes both the optimizer walk and checkpoint layout.
// Every parameter is seeded from hash(seed, name), so initialization does not
// depend on registration order.
template <class T>
struct ParamStore {
    std::map<std::string, Tensor<T>> params;
    std::map<std::string, Tensor<T>> buffers;
    std::uint64_t seed = 0;

    Tensor<T> param(const std::string& name, Shape shape, Init init) {
        check(!params.count(name) && !buffers.count(name), "duplicate parameter name " + name);
        Tensor<T> t(shape, true);
        Rng rng(hash_stream(seed, name));
        fill(t, init, rng);
        params.emplace(name, t);
        return t;
    }

    Tensor<T> buffer(const std::string& name, Shape shape, T value) {
        check(!params.count(name) && !buffers.count(name), "duplicate buffer name " + name);
        Tensor<T> t = Tensor<T>::full(std::move(shape), value);
        buffers.emplace(name, t);
        return t;
    }

    void zero_grad() {
        for (auto& [name, t] : params) t.zero_grad();
    }

    std::size_t count() const {
        std::size_t n = 0;
        for (const auto& [name, t] : params) n += t.size();
        return n;
    }

    // value snapshot of params and buffers, keyed by name
    std::map<std::string, std::vector<T>> snapshot() const {
        std::map<std::string, std::vector<T>> out;
        for (const auto& [name, t] : params) out.emplace(name, t.data());
        for (const auto& [name, t] : buffers) out.emplace(name, t.data());
        return out;
    }

    void restore(const std::map<std::string, std::vector<T>>& snap) {
        for (auto& [name, t] : params) t.data() = snap.at(name);
        for (auto& [name, t] : buffers) t.data() = snap.at(name);
    }

private:
    static void fill(Tensor<T>& t, Init init, Rng& rng) {
        const Shape& s = t.shape();
        switch (init) {
            case Init::Zero:
                break;
            case Init::One:
                for (auto& v : t.data()) v = T(1);
                break;
            case Init::XavierUniform: {
                const std::size_t fan_in = s.size() >= 2 ? s[0] : s[0];
                const std::size_t fan_out = s.size() >= 2 ? s[1] : s[0];
                const double limit = std::sqrt(6.0 / double(fan_in + fan_out));
                for (auto& v : t.data()) v = T(rng.uniform(-limit, limit));
                break;
            }
            case Init::HeNormal: {
                // conv kernels [Co,C,kh,kw]: fan_in = C*kh*kw
                std::size_t fan_in = 1;
                for (std::size_t i = 1; i < s.size(); ++i) fan_in *= s[i];
                const double stddev = std::sqrt(2.0 / double(fan_in));
                for (auto& v : t.data()) v = T(rng.normal(0.0, stddev));
                break;
            }
            case Init::Normal02:
                for (auto& v : t.data()) v = T(rng.normal(0.0, 0.02));
                break;
        }
    }
};

}  // namespace msvit
