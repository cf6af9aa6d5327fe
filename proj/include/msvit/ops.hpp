#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <vector>

#include "msvit/tensor.hpp"

namespace msvit {

// ---------------------------------------------------------------------------
// raw matmul kernels, shared by forward and backward passes
// ---------------------------------------------------------------------------

namespace detail {

// o[N,M] += a[N,K] * b[K,M]
template <class T>
void mm_nn(T* o, const T* a, const T* b, std::size_t N, std::size_t K, std::size_t M) {
    for (std::size_t i = 0; i < N; ++i) {
        T* orow = o + i * M;
        const T* arow = a + i * K;
        for (std::size_t k = 0; k < K; ++k) {
            const T av = arow[k];
            const T* brow = b + k * M;
            for (std::size_t j = 0; j < M; ++j) orow[j] += av * brow[j];
        }
    }
}

// o[N,M] += a[N,K] * b[M,K]^T
template <class T>
void mm_nt(T* o, const T* a, const T* b, std::size_t N, std::size_t K, std::size_t M) {
    for (std::size_t i = 0; i < N; ++i) {
        const T* arow = a + i * K;
        T* orow = o + i * M;
        for (std::size_t j = 0; j < M; ++j) {
            const T* brow = b + j * K;
            T acc = 0;
            for (std::size_t k = 0; k < K; ++k) acc += arow[k] * brow[k];
            orow[j] += acc;
        }
    }
}

// o[K,M] += a[N,K]^T * b[N,M]
template <class T>
void mm_tn(T* o, const T* a, const T* b, std::size_t N, std::size_t K, std::size_t M) {
    for (std::size_t i = 0; i < N; ++i) {
        const T* arow = a + i * K;
        const T* brow = b + i * M;
        for (std::size_t k = 0; k < K; ++k) {
            const T av = arow[k];
            T* orow = o + k * M;
            for (std::size_t j = 0; j < M; ++j) orow[j] += av * brow[j];
        }
    }
}

template <class T>
std::size_t row_width(const Tensor<T>& x) {
    return x.dim(0) ? x.size() / x.dim(0) : 0;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    check(a.shape() == b.shape(), "add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
    detail::attach<T>(out, {a, b}, [an = a.node(), bn = b.node()](TensorNode<T>& self) {
        if (an->requires_grad) {
            an->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] += self.grad[i];
        }
    });
    return out;
}

template <class T>
Tensor<T> scale(const Tensor<T>& x, T c) {
    Tensor<T> out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * c;
    detail::attach<T>(out, {x}, [xn = x.node(), c](TensorNode<T>& self) {
        xn->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += self.grad[i] * c;
    });
    return out;
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    check(a.shape() == b.shape(), "mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
    detail::attach<T>(out, {a, b}, [an = a.node(), bn = b.node()](TensorNode<T>& self) {
        if (an->requires_grad) {
            an->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i] * bn->value[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] += self.grad[i] * an->value[i];
        }
    });
    return out;
}

template <class T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
    check(a.shape() == b.shape(), "div: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] / b[i];
    detail::attach<T>(out, {a, b}, [an = a.node(), bn = b.node()](TensorNode<T>& self) {
        if (an->requires_grad) {
            an->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i] / bn->value[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i)
                bn->grad[i] -= self.grad[i] * an->value[i] / (bn->value[i] * bn->value[i]);
        }
    });
    return out;
}

// x[N,D] with per-row scalars s[N]
template <class T>
Tensor<T> mul_rows(const Tensor<T>& x, const Tensor<T>& s) {
    check(x.rank() == 2 && s.rank() == 1 && s.dim(0) == x.dim(0),
          "mul_rows: " + shape_str(x.shape()) + " vs " + shape_str(s.shape()));
    const std::size_t N = x.dim(0), D = x.dim(1);
    Tensor<T> out(x.shape());
    for (std::size_t i = 0; i < N; ++i)
        for (std::size_t j = 0; j < D; ++j) out[i * D + j] = x[i * D + j] * s[i];
    detail::attach<T>(out, {x, s}, [xn = x.node(), sn = s.node(), N, D](TensorNode<T>& self) {
        if (xn->requires_grad) {
            xn->ensure_grad();
            for (std::size_t i = 0; i < N; ++i)
                for (std::size_t j = 0; j < D; ++j) xn->grad[i * D + j] += self.grad[i * D + j] * sn->value[i];
        }
        if (sn->requires_grad) {
            sn->ensure_grad();
            for (std::size_t i = 0; i < N; ++i) {
                T acc = 0;
                for (std::size_t j = 0; j < D; ++j) acc += self.grad[i * D + j] * xn->value[i * D + j];
                sn->grad[i] += acc;
            }
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    check(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0),
          "matmul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const std::size_t N = a.dim(0), K = a.dim(1), M = b.dim(1);
    Tensor<T> out({N, M});
    detail::mm_nn(out.data().data(), a.data().data(), b.data().data(), N, K, M);
    detail::attach<T>(out, {a, b}, [an = a.node(), bn = b.node(), N, K, M](TensorNode<T>& self) {
        if (an->requires_grad) {
            an->ensure_grad();
            detail::mm_nt(an->grad.data(), self.grad.data(), bn->value.data(), N, M, K);
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            detail::mm_tn(bn->grad.data(), an->value.data(), self.grad.data(), N, K, M);
        }
    });
    return out;
}

// a[N,K] * b[M,K]^T, used for attention scores
template <class T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
    check(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(1),
          "matmul_nt: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const std::size_t N = a.dim(0), K = a.dim(1), M = b.dim(0);
    Tensor<T> out({N, M});
    detail::mm_nt(out.data().data(), a.data().data(), b.data().data(), N, K, M);
    detail::attach<T>(out, {a, b}, [an = a.node(), bn = b.node(), N, K, M](TensorNode<T>& self) {
        if (an->requires_grad) {
            an->ensure_grad();
            detail::mm_nn(an->grad.data(), self.grad.data(), bn->value.data(), N, M, K);
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            detail::mm_tn(bn->grad.data(), self.grad.data(), an->value.data(), N, M, K);
        }
    });
    return out;
}

// out[...,Dout] = x[...,Din] * w[Din,Dout] + b, leading axes flattened
template <class T>
Tensor<T> affine(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
    check(x.rank() >= 2, "affine: input must have rank >= 2, got " + shape_str(x.shape()));
    check(w.rank() == 2 && x.shape().back() == w.dim(0),
          "affine: shape mismatch " + shape_str(x.shape()) + " vs " + shape_str(w.shape()));
    const std::size_t Din = w.dim(0), Dout = w.dim(1);
    check(b.rank() == 1 && b.dim(0) == Dout,
          "affine: bias shape mismatch " + shape_str(b.shape()) + " vs " + shape_str(w.shape()));
    const std::size_t R = x.size() / Din;
    Shape out_shape = x.shape();
    out_shape.back() = Dout;
    Tensor<T> out(out_shape);
    for (std::size_t r = 0; r < R; ++r)
        std::copy(b.data().begin(), b.data().end(), out.data().begin() + r * Dout);
    detail::mm_nn(out.data().data(), x.data().data(), w.data().data(), R, Din, Dout);
    detail::attach<T>(out, {x, w, b},
                      [xn = x.node(), wn = w.node(), bn = b.node(), R, Din, Dout](TensorNode<T>& self) {
                          if (xn->requires_grad) {
                              xn->ensure_grad();
                              detail::mm_nt(xn->grad.data(), self.grad.data(), wn->value.data(), R, Dout, Din);
                          }
                          if (wn->requires_grad) {
                              wn->ensure_grad();
                              detail::mm_tn(wn->grad.data(), xn->value.data(), self.grad.data(), R, Din, Dout);
                          }
                          if (bn->requires_grad) {
                              bn->ensure_grad();
                              for (std::size_t r = 0; r < R; ++r)
                                  for (std::size_t j = 0; j < Dout; ++j) bn->grad[j] += self.grad[r * Dout + j];
                          }
                      });
    return out;
}

// ---------------------------------------------------------------------------
// activations
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
    Tensor<T> out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
    detail::attach<T>(out, {x}, [xn = x.node()](TensorNode<T>& self) {
        xn->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
            if (xn->value[i] > T(0)) xn->grad[i] += self.grad[i];
    });
    return out;
}

// exact erf form
template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
    constexpr T inv_sqrt2 = T(0.70710678118654752440);
    Tensor<T> out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i)
        out[i] = T(0.5) * x[i] * (T(1) + std::erf(x[i] * inv_sqrt2));
    detail::attach<T>(out, {x}, [xn = x.node()](TensorNode<T>& self) {
        constexpr T inv_sqrt2pi = T(0.39894228040143267794);
        xn->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            const T v = xn->value[i];
            const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
            const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * v * v);
            xn->grad[i] += self.grad[i] * (cdf + v * pdf);
        }
    });
    return out;
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
    Tensor<T> out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const T v = x[i];
        out[i] = v >= T(0) ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
    }
    detail::attach<T>(out, {x}, [xn = x.node()](TensorNode<T>& self) {
        xn->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            const T s = self.value[i];
            xn->grad[i] += self.grad[i] * s * (T(1) - s);
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// normalization and softmax
// ---------------------------------------------------------------------------

// subtract-max stabilized softmax along `axis`
template <class T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
    check(axis < x.rank(), "softmax: axis out of range for " + shape_str(x.shape()));
    const std::size_t n = x.dim(axis);
    check(n >= 1, "softmax: empty axis");
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
    for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);

    Tensor<T> out(x.shape());
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * n * inner + in;
            T mx = x[base];
            for (std::size_t k = 1; k < n; ++k) mx = std::max(mx, x[base + k * inner]);
            T sum = 0;
            for (std::size_t k = 0; k < n; ++k) {
                const T e = std::exp(x[base + k * inner] - mx);
                out[base + k * inner] = e;
                sum += e;
            }
            const T inv = T(1) / sum;
            for (std::size_t k = 0; k < n; ++k) out[base + k * inner] *= inv;
        }

    detail::attach<T>(out, {x}, [xn = x.node(), outer, n, inner](TensorNode<T>& self) {
        xn->ensure_grad();
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t in = 0; in < inner; ++in) {
                const std::size_t base = o * n * inner + in;
                T dot = 0;
                for (std::size_t k = 0; k < n; ++k) dot += self.grad[base + k * inner] * self.value[base + k * inner];
                for (std::size_t k = 0; k < n; ++k) {
                    const std::size_t idx = base + k * inner;
                    xn->grad[idx] += self.value[idx] * (self.grad[idx] - dot);
                }
            }
    });
    return out;
}

// normalizes over the last axis
template <class T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-5)) {
    const std::size_t D = x.shape().back();
    check(gamma.rank() == 1 && gamma.dim(0) == D && beta.rank() == 1 && beta.dim(0) == D,
          "layernorm: parameter shape mismatch for input " + shape_str(x.shape()));
    const std::size_t R = x.size() / D;
    Tensor<T> out(x.shape());
    std::vector<T> xhat(x.size());
    std::vector<T> rstd(R);
    for (std::size_t r = 0; r < R; ++r) {
        const T* row = x.data().data() + r * D;
        T mean = 0;
        for (std::size_t j = 0; j < D; ++j) mean += row[j];
        mean /= T(D);
        T var = 0;
        for (std::size_t j = 0; j < D; ++j) {
            const T d = row[j] - mean;
            var += d * d;
        }
        var /= T(D);
        const T rs = T(1) / std::sqrt(var + eps);
        rstd[r] = rs;
        for (std::size_t j = 0; j < D; ++j) {
            const T xh = (row[j] - mean) * rs;
            xhat[r * D + j] = xh;
            out[r * D + j] = gamma[j] * xh + beta[j];
        }
    }
    detail::attach<T>(out, {x, gamma, beta},
                      [xn = x.node(), gn = gamma.node(), bn = beta.node(), xhat = std::move(xhat),
                       rstd = std::move(rstd), R, D](TensorNode<T>& self) {
                          for (std::size_t r = 0; r < R; ++r) {
                              const T* dy = self.grad.data() + r * D;
                              const T* xh = xhat.data() + r * D;
                              if (xn->requires_grad) {
                                  xn->ensure_grad();
                                  T h1 = 0, h2 = 0;
                                  for (std::size_t j = 0; j < D; ++j) {
                                      const T dxh = dy[j] * gn->value[j];
                                      h1 += dxh;
                                      h2 += dxh * xh[j];
                                  }
                                  h1 /= T(D);
                                  h2 /= T(D);
                                  for (std::size_t j = 0; j < D; ++j) {
                                      const T dxh = dy[j] * gn->value[j];
                                      xn->grad[r * D + j] += rstd[r] * (dxh - h1 - xh[j] * h2);
                                  }
                              }
                              if (gn->requires_grad) {
                                  gn->ensure_grad();
                                  for (std::size_t j = 0; j < D; ++j) gn->grad[j] += dy[j] * xh[j];
                              }
                              if (bn->requires_grad) {
                                  bn->ensure_grad();
                                  for (std::size_t j = 0; j < D; ++j) bn->grad[j] += dy[j];
                              }
                          }
                      });
    return out;
}

// Per-channel batch normalization over axis 1; statistics run over every other
// axis. Train mode requires at least two elements per channel statistic
// (variance is undefined otherwise) and updates the running buffers in place.
template <class T>
Tensor<T> batchnorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                    Tensor<T>& running_mean, Tensor<T>& running_var, bool train,
                    T momentum = T(0.1), T eps = T(1e-5)) {
    check(x.rank() >= 2, "batchnorm: input must have rank >= 2, got " + shape_str(x.shape()));
    const std::size_t B = x.dim(0), C = x.dim(1);
    const std::size_t spatial = x.size() / (B * C);
    const std::size_t count = B * spatial;
    check(gamma.rank() == 1 && gamma.dim(0) == C && beta.rank() == 1 && beta.dim(0) == C,
          "batchnorm: parameter shape mismatch for input " + shape_str(x.shape()));
    check(running_mean.dim(0) == C && running_var.dim(0) == C, "batchnorm: running stat shape mismatch");
    if (train)
        check(count >= 2, "batchnorm: train mode needs >= 2 elements per channel statistic (batch size " +
                              std::to_string(B) + ")");

    const auto at = [C, spatial](std::size_t b, std::size_t c, std::size_t s) { return (b * C + c) * spatial + s; };

    Tensor<T> out(x.shape());
    std::vector<T> mean(C), rstd(C);
    if (train) {
        for (std::size_t c = 0; c < C; ++c) {
            T m = 0;
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t s = 0; s < spatial; ++s) m += x[at(b, c, s)];
            m /= T(count);
            T var = 0;
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t s = 0; s < spatial; ++s) {
                    const T d = x[at(b, c, s)] - m;
                    var += d * d;
                }
            var /= T(count);
            mean[c] = m;
            rstd[c] = T(1) / std::sqrt(var + eps);
            running_mean[c] = (T(1) - momentum) * running_mean[c] + momentum * m;
            running_var[c] = (T(1) - momentum) * running_var[c] + momentum * var;
        }
    } else {
        for (std::size_t c = 0; c < C; ++c) {
            mean[c] = running_mean[c];
            rstd[c] = T(1) / std::sqrt(running_var[c] + eps);
        }
    }

    std::vector<T> xhat(x.size());
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t s = 0; s < spatial; ++s) {
                const std::size_t i = at(b, c, s);
                const T xh = (x[i] - mean[c]) * rstd[c];
                xhat[i] = xh;
                out[i] = gamma[c] * xh + beta[c];
            }

    detail::attach<T>(out, {x, gamma, beta},
                      [xn = x.node(), gn = gamma.node(), bn = beta.node(), xhat = std::move(xhat),
                       rstd = std::move(rstd), B, C, spatial, count, train, at](TensorNode<T>& self) {
                          for (std::size_t c = 0; c < C; ++c) {
                              T sum_dy = 0, sum_dy_xh = 0;
                              for (std::size_t b = 0; b < B; ++b)
                                  for (std::size_t s = 0; s < spatial; ++s) {
                                      const std::size_t i = at(b, c, s);
                                      sum_dy += self.grad[i];
                                      sum_dy_xh += self.grad[i] * xhat[i];
                                  }
                              if (gn->requires_grad) {
                                  gn->ensure_grad();
                                  gn->grad[c] += sum_dy_xh;
                              }
                              if (bn->requires_grad) {
                                  bn->ensure_grad();
                                  bn->grad[c] += sum_dy;
                              }
                              if (xn->requires_grad) {
                                  xn->ensure_grad();
                                  const T g = gn->value[c];
                                  if (train) {
                                      const T m_dy = sum_dy / T(count);
                                      const T m_dy_xh = sum_dy_xh / T(count);
                                      for (std::size_t b = 0; b < B; ++b)
                                          for (std::size_t s = 0; s < spatial; ++s) {
                                              const std::size_t i = at(b, c, s);
                                              xn->grad[i] += g * rstd[c] * (self.grad[i] - m_dy - xhat[i] * m_dy_xh);
                                          }
                                  } else {
                                      for (std::size_t b = 0; b < B; ++b)
                                          for (std::size_t s = 0; s < spatial; ++s) {
                                              const std::size_t i = at(b, c, s);
                                              xn->grad[i] += g * rstd[c] * self.grad[i];
                                          }
                                  }
                              }
                          }
                      });
    return out;
}

// ---------------------------------------------------------------------------
// convolution
// ---------------------------------------------------------------------------

// 3x3 cross-correlation, stride 1, zero padding 1; spatial size preserved.
// Accepts [C,H,W] or [B,C,H,W].
template <class T>
Tensor<T> conv3x3(const Tensor<T>& x, const Tensor<T>& kernels, const Tensor<T>& bias) {
    check(x.rank() == 3 || x.rank() == 4, "conv3x3: input must be [C,H,W] or [B,C,H,W], got " + shape_str(x.shape()));
    const bool batched = x.rank() == 4;
    const std::size_t B = batched ? x.dim(0) : 1;
    const std::size_t C = x.dim(batched ? 1 : 0);
    const std::size_t H = x.dim(batched ? 2 : 1);
    const std::size_t W = x.dim(batched ? 3 : 2);
    check(kernels.rank() == 4 && kernels.dim(1) == C && kernels.dim(2) == 3 && kernels.dim(3) == 3,
          "conv3x3: kernel shape " + shape_str(kernels.shape()) + " does not match input " + shape_str(x.shape()));
    const std::size_t Co = kernels.dim(0);
    check(bias.rank() == 1 && bias.dim(0) == Co, "conv3x3: bias shape mismatch " + shape_str(bias.shape()));

    Shape out_shape = batched ? Shape{B, Co, H, W} : Shape{Co, H, W};
    Tensor<T> out(out_shape);
    const std::size_t in_img = C * H * W, out_img = Co * H * W, plane = H * W;

    for (std::size_t b = 0; b < B; ++b) {
        T* ob = out.data().data() + b * out_img;
        const T* xb = x.data().data() + b * in_img;
        for (std::size_t co = 0; co < Co; ++co) {
            T* oplane = ob + co * plane;
            std::fill(oplane, oplane + plane, bias[co]);
            for (std::size_t ci = 0; ci < C; ++ci) {
                const T* xplane = xb + ci * plane;
                const T* kbase = kernels.data().data() + (co * C + ci) * 9;
                for (std::size_t ky = 0; ky < 3; ++ky)
                    for (std::size_t kx = 0; kx < 3; ++kx) {
                        const T w = kbase[ky * 3 + kx];
                        // yy = y + ky - 1, xx = xpos + kx - 1 (zero padding 1)
                        const std::size_t ylo = ky == 0 ? 1 : 0;
                        const std::size_t yhi = ky == 2 ? H - 1 : H;
                        const std::size_t xlo = kx == 0 ? 1 : 0;
                        const std::size_t xhi = kx == 2 ? W - 1 : W;
                        for (std::size_t y = ylo; y < yhi; ++y) {
                            const T* xrow = xplane + (y + ky - 1) * W + kx - 1;
                            T* orow = oplane + y * W;
                            for (std::size_t xp = xlo; xp < xhi; ++xp) orow[xp] += w * xrow[xp];
                        }
                    }
            }
        }
    }

    detail::attach<T>(out, {x, kernels, bias},
                      [xn = x.node(), kn = kernels.node(), bn = bias.node(), B, C, Co, H, W, in_img, out_img,
                       plane](TensorNode<T>& self) {
                          if (xn->requires_grad) xn->ensure_grad();
                          if (kn->requires_grad) kn->ensure_grad();
                          if (bn->requires_grad) bn->ensure_grad();
                          for (std::size_t b = 0; b < B; ++b) {
                              const T* gb = self.grad.data() + b * out_img;
                              const T* xb = xn->value.data() + b * in_img;
                              for (std::size_t co = 0; co < Co; ++co) {
                                  const T* gplane = gb + co * plane;
                                  if (bn->requires_grad) {
                                      T acc = 0;
                                      for (std::size_t i = 0; i < plane; ++i) acc += gplane[i];
                                      bn->grad[co] += acc;
                                  }
                                  for (std::size_t ci = 0; ci < C; ++ci) {
                                      const T* xplane = xb + ci * plane;
                                      const std::size_t koff = (co * C + ci) * 9;
                                      for (std::size_t ky = 0; ky < 3; ++ky)
                                          for (std::size_t kx = 0; kx < 3; ++kx) {
                                              const std::size_t ylo = ky == 0 ? 1 : 0;
                                              const std::size_t yhi = ky == 2 ? H - 1 : H;
                                              const std::size_t xlo = kx == 0 ? 1 : 0;
                                              const std::size_t xhi = kx == 2 ? W - 1 : W;
                                              const T w = kn->value[koff + ky * 3 + kx];
                                              T kacc = 0;
                                              for (std::size_t y = ylo; y < yhi; ++y) {
                                                  const std::size_t xoff = (y + ky - 1) * W + kx - 1;
                                                  const T* grow = gplane + y * W;
                                                  for (std::size_t xp = xlo; xp < xhi; ++xp) {
                                                      kacc += grow[xp] * xplane[xoff + xp];
                                                      if (xn->requires_grad)
                                                          xn->grad[b * in_img + ci * plane + xoff + xp] +=
                                                              w * grow[xp];
                                                  }
                                              }
                                              if (kn->requires_grad) kn->grad[koff + ky * 3 + kx] += kacc;
                                          }
                                  }
                              }
                          }
                      });
    return out;
}

// [B,C,H,W] -> [B,C]
template <class T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
    check(x.rank() == 4, "global_avg_pool: input must be [B,C,H,W], got " + shape_str(x.shape()));
    const std::size_t B = x.dim(0), C = x.dim(1), plane = x.dim(2) * x.dim(3);
    Tensor<T> out({B, C});
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < C; ++c) {
            const T* p = x.data().data() + (b * C + c) * plane;
            T acc = 0;
            for (std::size_t i = 0; i < plane; ++i) acc += p[i];
            out[b * C + c] = acc / T(plane);
        }
    detail::attach<T>(out, {x}, [xn = x.node(), B, C, plane](TensorNode<T>& self) {
        xn->ensure_grad();
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t c = 0; c < C; ++c) {
                const T g = self.grad[b * C + c] / T(plane);
                T* p = xn->grad.data() + (b * C + c) * plane;
                for (std::size_t i = 0; i < plane; ++i) p[i] += g;
            }
    });
    return out;
}

// ---------------------------------------------------------------------------
// reductions and reshaping
// ---------------------------------------------------------------------------

// mean over axis 0 of [N,...] -> [...]
template <class T>
Tensor<T> mean_axis0(const Tensor<T>& x) {
    check(x.rank() >= 2, "mean_axis0: input must have rank >= 2, got " + shape_str(x.shape()));
    const std::size_t N = x.dim(0);
    const std::size_t D = x.size() / N;
    Shape out_shape(x.shape().begin() + 1, x.shape().end());
    Tensor<T> out(out_shape);
    for (std::size_t i = 0; i < N; ++i)
        for (std::size_t j = 0; j < D; ++j) out[j] += x[i * D + j];
    for (std::size_t j = 0; j < D; ++j) out[j] /= T(N);
    detail::attach<T>(out, {x}, [xn = x.node(), N, D](TensorNode<T>& self) {
        xn->ensure_grad();
        for (std::size_t i = 0; i < N; ++i)
            for (std::size_t j = 0; j < D; ++j) xn->grad[i * D + j] += self.grad[j] / T(N);
    });
    return out;
}

template <class T>
Tensor<T> sum_all(const Tensor<T>& x) {
    Tensor<T> out({1});
    T acc = 0;
    for (std::size_t i = 0; i < x.size(); ++i) acc += x[i];
    out[0] = acc;
    detail::attach<T>(out, {x}, [xn = x.node()](TensorNode<T>& self) {
        xn->ensure_grad();
        for (std::size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += self.grad[0];
    });
    return out;
}

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
    check(shape_numel(shape) == x.size(),
          "reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
    Tensor<T> out = Tensor<T>::from(std::move(shape), x.data());
    detail::attach<T>(out, {x}, [xn = x.node()](TensorNode<T>& self) {
        xn->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += self.grad[i];
    });
    return out;
}

// ---------------------------------------------------------------------------
// concatenation, gathering, slicing (axis 0 rows unless stated)
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
    check(!parts.empty(), "concat_rows: no inputs");
    const std::size_t width = detail::row_width(parts[0]);
    std::size_t rows = 0;
    for (const auto& p : parts) {
        check(detail::row_width(p) == width, "concat_rows: row width mismatch " + shape_str(p.shape()));
        rows += p.dim(0);
    }
    Shape out_shape = parts[0].shape();
    out_shape[0] = rows;
    Tensor<T> out(out_shape);
    std::size_t off = 0;
    for (const auto& p : parts) {
        std::copy(p.data().begin(), p.data().end(), out.data().begin() + off);
        off += p.size();
    }
    if (grad_mode()) {
        bool any = false;
        for (const auto& p : parts) any = any || p.requires_grad();
        if (any) {
            std::vector<std::shared_ptr<TensorNode<T>>> nodes;
            for (const auto& p : parts) nodes.push_back(p.node());
            out.raw()->requires_grad = true;
            for (const auto& n : nodes)
                if (n->requires_grad) out.raw()->parents.push_back(n);
            out.raw()->backward_fn = [nodes](TensorNode<T>& self) {
                std::size_t off = 0;
                for (const auto& n : nodes) {
                    if (n->requires_grad) {
                        n->ensure_grad();
                        for (std::size_t i = 0; i < n->value.size(); ++i) n->grad[i] += self.grad[off + i];
                    }
                    off += n->value.size();
                }
            };
        }
    }
    return out;
}

// [N,Da] ++ [N,Db] -> [N,Da+Db]
template <class T>
Tensor<T> concat_cols(const Tensor<T>& a, const Tensor<T>& b) {
    check(a.rank() == 2 && b.rank() == 2 && a.dim(0) == b.dim(0),
          "concat_cols: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const std::size_t N = a.dim(0), Da = a.dim(1), Db = b.dim(1);
    Tensor<T> out({N, Da + Db});
    for (std::size_t i = 0; i < N; ++i) {
        std::copy(a.data().begin() + i * Da, a.data().begin() + (i + 1) * Da, out.data().begin() + i * (Da + Db));
        std::copy(b.data().begin() + i * Db, b.data().begin() + (i + 1) * Db,
                  out.data().begin() + i * (Da + Db) + Da);
    }
    detail::attach<T>(out, {a, b}, [an = a.node(), bn = b.node(), N, Da, Db](TensorNode<T>& self) {
        for (std::size_t i = 0; i < N; ++i) {
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::size_t j = 0; j < Da; ++j) an->grad[i * Da + j] += self.grad[i * (Da + Db) + j];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::size_t j = 0; j < Db; ++j) bn->grad[i * Db + j] += self.grad[i * (Da + Db) + Da + j];
            }
        }
    });
    return out;
}

// stack rank-1 tensors [D] into [B,D]
template <class T>
Tensor<T> stack_rows(const std::vector<Tensor<T>>& rows) {
    check(!rows.empty(), "stack_rows: no inputs");
    const std::size_t D = rows[0].size();
    Tensor<T> out({rows.size(), D});
    for (std::size_t i = 0; i < rows.size(); ++i) {
        check(rows[i].rank() == 1 && rows[i].size() == D, "stack_rows: shape mismatch");
        std::copy(rows[i].data().begin(), rows[i].data().end(), out.data().begin() + i * D);
    }
    if (grad_mode()) {
        bool any = false;
        for (const auto& r : rows) any = any || r.requires_grad();
        if (any) {
            std::vector<std::shared_ptr<TensorNode<T>>> nodes;
            for (const auto& r : rows) nodes.push_back(r.node());
            out.raw()->requires_grad = true;
            for (const auto& n : nodes)
                if (n->requires_grad) out.raw()->parents.push_back(n);
            out.raw()->backward_fn = [nodes, D](TensorNode<T>& self) {
                for (std::size_t i = 0; i < nodes.size(); ++i) {
                    if (!nodes[i]->requires_grad) continue;
                    nodes[i]->ensure_grad();
                    for (std::size_t j = 0; j < D; ++j) nodes[i]->grad[j] += self.grad[i * D + j];
                }
            };
        }
    }
    return out;
}

template <class T>
Tensor<T> gather_rows(const Tensor<T>& x, const std::vector<std::size_t>& idx) {
    const std::size_t width = detail::row_width(x);
    Shape out_shape = x.shape();
    out_shape[0] = idx.size();
    Tensor<T> out(out_shape);
    for (std::size_t i = 0; i < idx.size(); ++i) {
        check(idx[i] < x.dim(0), "gather_rows: index out of range");
        std::copy(x.data().begin() + idx[i] * width, x.data().begin() + (idx[i] + 1) * width,
                  out.data().begin() + i * width);
    }
    detail::attach<T>(out, {x}, [xn = x.node(), idx, width](TensorNode<T>& self) {
        xn->ensure_grad();
        for (std::size_t i = 0; i < idx.size(); ++i)
            for (std::size_t j = 0; j < width; ++j) xn->grad[idx[i] * width + j] += self.grad[i * width + j];
    });
    return out;
}

// rows of x placed at idx within [n_rows, ...]; all other rows exactly zero
template <class T>
Tensor<T> scatter_rows(const Tensor<T>& x, const std::vector<std::size_t>& idx, std::size_t n_rows) {
    check(x.dim(0) == idx.size(), "scatter_rows: row count mismatch");
    const std::size_t width = detail::row_width(x);
    Shape out_shape = x.shape();
    out_shape[0] = n_rows;
    Tensor<T> out(out_shape);
    for (std::size_t i = 0; i < idx.size(); ++i) {
        check(idx[i] < n_rows, "scatter_rows: index out of range");
        std::copy(x.data().begin() + i * width, x.data().begin() + (i + 1) * width,
                  out.data().begin() + idx[i] * width);
    }
    detail::attach<T>(out, {x}, [xn = x.node(), idx, width](TensorNode<T>& self) {
        xn->ensure_grad();
        for (std::size_t i = 0; i < idx.size(); ++i)
            for (std::size_t j = 0; j < width; ++j) xn->grad[i * width + j] += self.grad[idx[i] * width + j];
    });
    return out;
}

template <class T>
Tensor<T> slice_rows(const Tensor<T>& x, std::size_t r0, std::size_t r1) {
    check(r0 <= r1 && r1 <= x.dim(0), "slice_rows: bad range");
    const std::size_t width = detail::row_width(x);
    Shape out_shape = x.shape();
    out_shape[0] = r1 - r0;
    Tensor<T> out(out_shape);
    std::copy(x.data().begin() + r0 * width, x.data().begin() + r1 * width, out.data().begin());
    detail::attach<T>(out, {x}, [xn = x.node(), r0, width](TensorNode<T>& self) {
        xn->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) xn->grad[r0 * width + i] += self.grad[i];
    });
    return out;
}

template <class T>
Tensor<T> slice_cols(const Tensor<T>& x, std::size_t c0, std::size_t c1) {
    check(x.rank() == 2 && c0 <= c1 && c1 <= x.dim(1), "slice_cols: bad range for " + shape_str(x.shape()));
    const std::size_t N = x.dim(0), D = x.dim(1), W = c1 - c0;
    Tensor<T> out({N, W});
    for (std::size_t i = 0; i < N; ++i)
        std::copy(x.data().begin() + i * D + c0, x.data().begin() + i * D + c1, out.data().begin() + i * W);
    detail::attach<T>(out, {x}, [xn = x.node(), N, D, W, c0](TensorNode<T>& self) {
        xn->ensure_grad();
        for (std::size_t i = 0; i < N; ++i)
            for (std::size_t j = 0; j < W; ++j) xn->grad[i * D + c0 + j] += self.grad[i * W + j];
    });
    return out;
}

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

// mean over the batch of -log softmax(logits)[label]
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<int>& labels) {
    check(logits.rank() == 2, "cross_entropy: logits must be [B,C], got " + shape_str(logits.shape()));
    const std::size_t B = logits.dim(0), C = logits.dim(1);
    check(labels.size() == B, "cross_entropy: label count mismatch");
    std::vector<T> probs(logits.size());
    Tensor<T> out({1});
    T total = 0;
    for (std::size_t b = 0; b < B; ++b) {
        const int y = labels[b];
        check(y >= 0 && static_cast<std::size_t>(y) < C, "cross_entropy: label out of range");
        const T* row = logits.data().data() + b * C;
        T mx = row[0];
        for (std::size_t c = 1; c < C; ++c) mx = std::max(mx, row[c]);
        T sum = 0;
        for (std::size_t c = 0; c < C; ++c) {
            const T e = std::exp(row[c] - mx);
            probs[b * C + c] = e;
            sum += e;
        }
        const T inv = T(1) / sum;
        for (std::size_t c = 0; c < C; ++c) probs[b * C + c] *= inv;
        total += mx + std::log(sum) - row[y];
    }
    out[0] = total / T(B);
    detail::attach<T>(out, {logits},
                      [ln = logits.node(), probs = std::move(probs), labels, B, C](TensorNode<T>& self) {
                          ln->ensure_grad();
                          const T g = self.grad[0] / T(B);
                          for (std::size_t b = 0; b < B; ++b)
                              for (std::size_t c = 0; c < C; ++c) {
                                  T d = probs[b * C + c];
                                  if (static_cast<std::size_t>(labels[b]) == c) d -= T(1);
                                  ln->grad[b * C + c] += g * d;
                              }
                      });
    return out;
}

// mean over the batch of the per-row mean squared error
template <class T>
Tensor<T> mse(const Tensor<T>& pred, const Tensor<T>& target) {
    check(pred.shape() == target.shape() && pred.rank() == 2,
          "mse: shape mismatch " + shape_str(pred.shape()) + " vs " + shape_str(target.shape()));
    const std::size_t n = pred.size();
    Tensor<T> out({1});
    T acc = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const T d = pred[i] - target[i];
        acc += d * d;
    }
    out[0] = acc / T(n);
    detail::attach<T>(out, {pred, target}, [pn = pred.node(), tn = target.node(), n](TensorNode<T>& self) {
        const T g = self.grad[0] * T(2) / T(n);
        if (pn->requires_grad) {
            pn->ensure_grad();
            for (std::size_t i = 0; i < n; ++i) pn->grad[i] += g * (pn->value[i] - tn->value[i]);
        }
        if (tn->requires_grad) {
            tn->ensure_grad();
            for (std::size_t i = 0; i < n; ++i) tn->grad[i] -= g * (pn->value[i] - tn->value[i]);
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// small composites
// ---------------------------------------------------------------------------

enum class Act { Relu, Gelu };

template <class T>
Tensor<T> mlp2(const Tensor<T>& x, const Tensor<T>& w1, const Tensor<T>& b1, const Tensor<T>& w2,
               const Tensor<T>& b2, Act act) {
    Tensor<T> h = affine(x, w1, b1);
    h = act == Act::Relu ? relu(h) : gelu(h);
    return affine(h, w2, b2);
}

// Indices of the k largest values; ties broken by lower index; result sorted
// ascending.
template <class T>
std::vector<std::size_t> top_k_indices(const std::vector<T>& p, std::size_t k) {
    check(k >= 1 && k <= p.size(), "top_k_indices: k=" + std::to_string(k) + " out of range for n=" +
                                       std::to_string(p.size()));
    std::vector<std::size_t> idx(p.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), [&](std::size_t a, std::size_t b) {
        if (p[a] != p[b]) return p[a] > p[b];
        return a < b;
    });
    idx.resize(k);
    std::sort(idx.begin(), idx.end());
    return idx;
}

}  // namespace msvit
