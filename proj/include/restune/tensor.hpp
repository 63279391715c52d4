// SPDX-License-Identifier: Apache-2.0
//
// Dense 64-bit tensor with tape-based reverse-mode differentiation.
// Row-major storage, no views or strides; the only broadcasts are scalar and
// trailing-dimension bias. Gradients accumulate additively into an optional
// per-tensor buffer, so callers zero grads explicitly between optimizer steps.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "restune/random.hpp"

namespace restune {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << ']';
    return os.str();
}

class Tensor {
public:
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::optional<std::vector<double>> grad;
    // True for tensors created directly (parameters, inputs); ops clear it.
    bool leaf = true;

    Tensor() = default;
    Tensor(Shape s, bool rg) : shape(std::move(s)), data(shape_numel(shape), 0.0), requires_grad(rg) {}

    std::size_t numel() const { return data.size(); }
    std::size_t ndim() const { return shape.size(); }

    std::size_t rows() const { return shape.empty() ? 1 : shape[0]; }
    std::size_t cols() const { return shape.size() < 2 ? (shape.empty() ? 1 : shape[0]) : shape[1]; }

    double& at(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
    double at(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }

    double item() const {
        if (numel() != 1) throw std::invalid_argument("item: tensor " + shape_str(shape) + " is not a scalar");
        return data[0];
    }

    void ensure_grad() {
        if (!requires_grad)
            throw std::logic_error("ensure_grad: tensor does not require grad");
        if (!grad) grad.emplace(data.size(), 0.0);
    }

    /// Zero the accumulated gradient, keeping the buffer if one exists.
    void zero_grad() {
        if (grad) std::fill(grad->begin(), grad->end(), 0.0);
    }
};

using TensorPtr = std::shared_ptr<Tensor>;

inline TensorPtr make_tensor(Shape shape, bool requires_grad = false) {
    return std::make_shared<Tensor>(std::move(shape), requires_grad);
}

inline TensorPtr full_tensor(Shape shape, double value, bool requires_grad = false) {
    auto t = make_tensor(std::move(shape), requires_grad);
    std::fill(t->data.begin(), t->data.end(), value);
    return t;
}

inline TensorPtr scalar_tensor(double value, bool requires_grad = false) {
    auto t = make_tensor({1}, requires_grad);
    t->data[0] = value;
    return t;
}

inline TensorPtr tensor2d(const std::vector<std::vector<double>>& rows, bool requires_grad = false) {
    const std::size_t n = rows.size();
    const std::size_t m = n ? rows[0].size() : 0;
    auto t = make_tensor({n, m}, requires_grad);
    for (std::size_t i = 0; i < n; ++i) {
        if (rows[i].size() != m) throw std::invalid_argument("tensor2d: ragged rows");
        std::copy(rows[i].begin(), rows[i].end(), t->data.begin() + static_cast<std::ptrdiff_t>(i * m));
    }
    return t;
}

inline TensorPtr gaussian_tensor(Shape shape, Rng& rng, double stddev, bool requires_grad = false) {
    auto t = make_tensor(std::move(shape), requires_grad);
    for (auto& v : t->data) v = rng.gaussian(0.0, stddev);
    return t;
}

/// Copy of `t` severed from any tape: leaf, requires_grad == false, no grad.
inline TensorPtr detach(const TensorPtr& t) {
    auto out = make_tensor(t->shape, false);
    out->data = t->data;
    return out;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    if (a.shape != b.shape)
        throw std::invalid_argument("max_abs_diff: shapes " + shape_str(a.shape) + " vs " + shape_str(b.shape));
    double m = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) m = std::max(m, std::abs(a.data[i] - b.data[i]));
    return m;
}

inline double max_abs_diff(const TensorPtr& a, const TensorPtr& b) { return max_abs_diff(*a, *b); }

namespace detail {

[[noreturn]] inline void dim_error(const char* op, const Shape& a, const Shape& b) {
    throw std::invalid_argument(std::string(op) + ": incompatible shapes " + shape_str(a) + " vs " + shape_str(b));
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Exact (erf-based) GELU and its derivative.
inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }
inline double gelu_grad(double x) {
    const double cdf = 0.5 * (1.0 + std::erf(x / std::sqrt(2.0)));
    const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * 3.14159265358979323846);
    return cdf + x * pdf;
}

} // namespace detail

/// Records one op per node, in execution order, so inputs always precede
/// their consumers. backward() walks the nodes once in reverse. A tape is
/// owned by a single execution context; tensors without grad state may be
/// shared read-only.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // ---- matrix ops ----

    TensorPtr matmul(const TensorPtr& a, const TensorPtr& b) {
        if (a->ndim() != 2 || b->ndim() != 2 || a->shape[1] != b->shape[0])
            detail::dim_error("matmul", a->shape, b->shape);
        const std::size_t m = a->shape[0], k = a->shape[1], n = b->shape[1];
        auto out = make_tensor({m, n});
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
                const double av = a->data[i * k + p];
                if (av == 0.0) continue;
                for (std::size_t j = 0; j < n; ++j) out->data[i * n + j] += av * b->data[p * n + j];
            }
        return record(out, {a, b}, [a, b, out, m, k, n] {
            const auto& g = *out->grad;
            if (a->requires_grad) {
                a->ensure_grad();
                auto& ga = *a->grad;
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t p = 0; p < k; ++p) {
                        double acc = 0.0;
                        for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * b->data[p * n + j];
                        ga[i * k + p] += acc;
                    }
            }
            if (b->requires_grad) {
                b->ensure_grad();
                auto& gb = *b->grad;
                for (std::size_t p = 0; p < k; ++p)
                    for (std::size_t j = 0; j < n; ++j) {
                        double acc = 0.0;
                        for (std::size_t i = 0; i < m; ++i) acc += a->data[i * k + p] * g[i * n + j];
                        gb[p * n + j] += acc;
                    }
            }
        });
    }

    TensorPtr transpose(const TensorPtr& a) {
        if (a->ndim() != 2) detail::dim_error("transpose", a->shape, a->shape);
        const std::size_t m = a->shape[0], n = a->shape[1];
        auto out = make_tensor({n, m});
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) out->data[j * m + i] = a->data[i * n + j];
        return record(out, {a}, [a, out, m, n] {
            const auto& g = *out->grad;
            a->ensure_grad();
            auto& ga = *a->grad;
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
        });
    }

    /// Row-wise softmax with per-row max subtraction. Rejects non-finite input.
    TensorPtr row_softmax(const TensorPtr& a) {
        if (a->ndim() != 2) detail::dim_error("row_softmax", a->shape, a->shape);
        for (double v : a->data)
            if (!std::isfinite(v)) throw std::domain_error("row_softmax: non-finite logit");
        const std::size_t n = a->shape[0], m = a->shape[1];
        auto out = make_tensor({n, m});
        for (std::size_t i = 0; i < n; ++i) {
            if (m == 0) continue;
            double mx = a->data[i * m];
            for (std::size_t j = 1; j < m; ++j) mx = std::max(mx, a->data[i * m + j]);
            double z = 0.0;
            for (std::size_t j = 0; j < m; ++j) {
                const double e = std::exp(a->data[i * m + j] - mx);
                out->data[i * m + j] = e;
                z += e;
            }
            for (std::size_t j = 0; j < m; ++j) out->data[i * m + j] /= z;
        }
        return record(out, {a}, [a, out, n, m] {
            const auto& g = *out->grad;
            a->ensure_grad();
            auto& ga = *a->grad;
            for (std::size_t i = 0; i < n; ++i) {
                double dot = 0.0;
                for (std::size_t j = 0; j < m; ++j) dot += g[i * m + j] * out->data[i * m + j];
                for (std::size_t j = 0; j < m; ++j)
                    ga[i * m + j] += out->data[i * m + j] * (g[i * m + j] - dot);
            }
        });
    }

    // ---- elementwise ops (scalar and trailing-dim bias broadcast only) ----

    TensorPtr add(const TensorPtr& a, const TensorPtr& b) { return binary_add(a, b, +1.0); }
    TensorPtr sub(const TensorPtr& a, const TensorPtr& b) { return binary_add(a, b, -1.0); }

    TensorPtr mul(const TensorPtr& a, const TensorPtr& b) {
        if (b->numel() == 1 && a->numel() != 1) {
            auto out = make_tensor(a->shape);
            const double s = b->data[0];
            for (std::size_t i = 0; i < a->numel(); ++i) out->data[i] = a->data[i] * s;
            return record(out, {a, b}, [a, b, out] {
                const auto& g = *out->grad;
                if (a->requires_grad) {
                    a->ensure_grad();
                    for (std::size_t i = 0; i < g.size(); ++i) (*a->grad)[i] += g[i] * b->data[0];
                }
                if (b->requires_grad) {
                    b->ensure_grad();
                    double acc = 0.0;
                    for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * a->data[i];
                    (*b->grad)[0] += acc;
                }
            });
        }
        if (a->shape != b->shape) detail::dim_error("mul", a->shape, b->shape);
        auto out = make_tensor(a->shape);
        for (std::size_t i = 0; i < a->numel(); ++i) out->data[i] = a->data[i] * b->data[i];
        return record(out, {a, b}, [a, b, out] {
            const auto& g = *out->grad;
            if (a->requires_grad) {
                a->ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) (*a->grad)[i] += g[i] * b->data[i];
            }
            if (b->requires_grad) {
                b->ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) (*b->grad)[i] += g[i] * a->data[i];
            }
        });
    }

    TensorPtr div(const TensorPtr& a, const TensorPtr& b) {
        const bool scalar_rhs = b->numel() == 1 && a->numel() != 1;
        if (!scalar_rhs && a->shape != b->shape) detail::dim_error("div", a->shape, b->shape);
        auto out = make_tensor(a->shape);
        for (std::size_t i = 0; i < a->numel(); ++i) out->data[i] = a->data[i] / b->data[scalar_rhs ? 0 : i];
        return record(out, {a, b}, [a, b, out, scalar_rhs] {
            const auto& g = *out->grad;
            if (a->requires_grad) {
                a->ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) (*a->grad)[i] += g[i] / b->data[scalar_rhs ? 0 : i];
            }
            if (b->requires_grad) {
                b->ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) {
                    const std::size_t k = scalar_rhs ? 0 : i;
                    (*b->grad)[k] -= g[i] * a->data[i] / (b->data[k] * b->data[k]);
                }
            }
        });
    }

    TensorPtr add_scalar(const TensorPtr& a, double c) {
        auto out = make_tensor(a->shape);
        for (std::size_t i = 0; i < a->numel(); ++i) out->data[i] = a->data[i] + c;
        return record(out, {a}, [a, out] {
            const auto& g = *out->grad;
            a->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) (*a->grad)[i] += g[i];
        });
    }

    TensorPtr mul_scalar(const TensorPtr& a, double c) {
        auto out = make_tensor(a->shape);
        for (std::size_t i = 0; i < a->numel(); ++i) out->data[i] = a->data[i] * c;
        return record(out, {a}, [a, out, c] {
            const auto& g = *out->grad;
            a->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) (*a->grad)[i] += g[i] * c;
        });
    }

    TensorPtr sigmoid(const TensorPtr& a) {
        return unary(a, [](double x) { return detail::sigmoid(x); },
                     [](double x, double y) { (void)x; return y * (1.0 - y); });
    }

    TensorPtr gelu(const TensorPtr& a) {
        return unary(a, [](double x) { return detail::gelu(x); },
                     [](double x, double) { return detail::gelu_grad(x); });
    }

    TensorPtr exp(const TensorPtr& a) {
        return unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
    }

    TensorPtr log(const TensorPtr& a) {
        return unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
    }

    // ---- row-indexed ops ----

    /// out[i,j] = a[i,j] * s[i], s of shape [n x 1].
    TensorPtr row_scale(const TensorPtr& a, const TensorPtr& s) {
        check_rowvec("row_scale", a, s);
        const std::size_t n = a->shape[0], m = a->shape[1];
        auto out = make_tensor({n, m});
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < m; ++j) out->data[i * m + j] = a->data[i * m + j] * s->data[i];
        return record(out, {a, s}, [a, s, out, n, m] {
            const auto& g = *out->grad;
            if (a->requires_grad) {
                a->ensure_grad();
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < m; ++j) (*a->grad)[i * m + j] += g[i * m + j] * s->data[i];
            }
            if (s->requires_grad) {
                s->ensure_grad();
                for (std::size_t i = 0; i < n; ++i) {
                    double acc = 0.0;
                    for (std::size_t j = 0; j < m; ++j) acc += g[i * m + j] * a->data[i * m + j];
                    (*s->grad)[i] += acc;
                }
            }
        });
    }

    /// out[i,j] = a[i,j] - s[i], s of shape [n x 1].
    TensorPtr sub_rowvec(const TensorPtr& a, const TensorPtr& s) {
        check_rowvec("sub_rowvec", a, s);
        const std::size_t n = a->shape[0], m = a->shape[1];
        auto out = make_tensor({n, m});
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < m; ++j) out->data[i * m + j] = a->data[i * m + j] - s->data[i];
        return record(out, {a, s}, [a, s, out, n, m] {
            const auto& g = *out->grad;
            if (a->requires_grad) {
                a->ensure_grad();
                for (std::size_t i = 0; i < n * m; ++i) (*a->grad)[i] += g[i];
            }
            if (s->requires_grad) {
                s->ensure_grad();
                for (std::size_t i = 0; i < n; ++i) {
                    double acc = 0.0;
                    for (std::size_t j = 0; j < m; ++j) acc += g[i * m + j];
                    (*s->grad)[i] -= acc;
                }
            }
        });
    }

    TensorPtr row_sum(const TensorPtr& a) {
        if (a->ndim() != 2) detail::dim_error("row_sum", a->shape, a->shape);
        const std::size_t n = a->shape[0], m = a->shape[1];
        auto out = make_tensor({n, 1});
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < m; ++j) out->data[i] += a->data[i * m + j];
        return record(out, {a}, [a, out, n, m] {
            const auto& g = *out->grad;
            a->ensure_grad();
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < m; ++j) (*a->grad)[i * m + j] += g[i];
        });
    }

    TensorPtr sum(const TensorPtr& a) {
        auto out = make_tensor({1});
        out->data[0] = std::accumulate(a->data.begin(), a->data.end(), 0.0);
        return record(out, {a}, [a, out] {
            const double g = (*out->grad)[0];
            a->ensure_grad();
            for (auto& v : *a->grad) v += g;
        });
    }

    /// Per-row max as a detached constant [n x 1]; used as a shift inside the
    /// softmax-mass gates, where it cancels exactly and carries no gradient.
    TensorPtr row_max_detached(const TensorPtr& a) {
        if (a->ndim() != 2) detail::dim_error("row_max_detached", a->shape, a->shape);
        const std::size_t n = a->shape[0], m = a->shape[1];
        auto out = make_tensor({n, 1});
        for (std::size_t i = 0; i < n; ++i) {
            double mx = m ? a->data[i * m] : 0.0;
            for (std::size_t j = 1; j < m; ++j) mx = std::max(mx, a->data[i * m + j]);
            out->data[i] = mx;
        }
        return out;
    }

    // ---- structural ops ----

    TensorPtr concat_rows(const TensorPtr& a, const TensorPtr& b) {
        if (a->ndim() != 2 || b->ndim() != 2 || a->shape[1] != b->shape[1])
            detail::dim_error("concat_rows", a->shape, b->shape);
        const std::size_t p = a->shape[0], q = b->shape[0], m = a->shape[1];
        auto out = make_tensor({p + q, m});
        std::copy(a->data.begin(), a->data.end(), out->data.begin());
        std::copy(b->data.begin(), b->data.end(), out->data.begin() + static_cast<std::ptrdiff_t>(p * m));
        return record(out, {a, b}, [a, b, out, p, q, m] {
            const auto& g = *out->grad;
            if (a->requires_grad) {
                a->ensure_grad();
                for (std::size_t i = 0; i < p * m; ++i) (*a->grad)[i] += g[i];
            }
            if (b->requires_grad) {
                b->ensure_grad();
                for (std::size_t i = 0; i < q * m; ++i) (*b->grad)[i] += g[p * m + i];
            }
        });
    }

    TensorPtr slice_rows(const TensorPtr& a, std::size_t start, std::size_t count) {
        if (a->ndim() != 2 || start + count > a->shape[0])
            throw std::invalid_argument("slice_rows: range [" + std::to_string(start) + ", " +
                                        std::to_string(start + count) + ") out of " + shape_str(a->shape));
        const std::size_t m = a->shape[1];
        auto out = make_tensor({count, m});
        std::copy(a->data.begin() + static_cast<std::ptrdiff_t>(start * m),
                  a->data.begin() + static_cast<std::ptrdiff_t>((start + count) * m), out->data.begin());
        return record(out, {a}, [a, out, start, count, m] {
            const auto& g = *out->grad;
            a->ensure_grad();
            for (std::size_t i = 0; i < count * m; ++i) (*a->grad)[start * m + i] += g[i];
        });
    }

    TensorPtr slice_cols(const TensorPtr& a, std::size_t start, std::size_t count) {
        if (a->ndim() != 2 || start + count > a->shape[1])
            throw std::invalid_argument("slice_cols: range [" + std::to_string(start) + ", " +
                                        std::to_string(start + count) + ") out of " + shape_str(a->shape));
        const std::size_t n = a->shape[0], m = a->shape[1];
        auto out = make_tensor({n, count});
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < count; ++j) out->data[i * count + j] = a->data[i * m + start + j];
        return record(out, {a}, [a, out, start, count, n, m] {
            const auto& g = *out->grad;
            a->ensure_grad();
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < count; ++j) (*a->grad)[i * m + start + j] += g[i * count + j];
        });
    }

    TensorPtr concat_cols(const std::vector<TensorPtr>& parts) {
        if (parts.empty()) throw std::invalid_argument("concat_cols: empty part list");
        const std::size_t n = parts[0]->shape[0];
        std::size_t total = 0;
        for (const auto& p : parts) {
            if (p->ndim() != 2 || p->shape[0] != n) detail::dim_error("concat_cols", parts[0]->shape, p->shape);
            total += p->shape[1];
        }
        auto out = make_tensor({n, total});
        std::size_t off = 0;
        for (const auto& p : parts) {
            const std::size_t w = p->shape[1];
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < w; ++j) out->data[i * total + off + j] = p->data[i * w + j];
            off += w;
        }
        return record(out, parts, [parts, out, n, total] {
            const auto& g = *out->grad;
            std::size_t off = 0;
            for (const auto& p : parts) {
                const std::size_t w = p->shape[1];
                if (p->requires_grad) {
                    p->ensure_grad();
                    for (std::size_t i = 0; i < n; ++i)
                        for (std::size_t j = 0; j < w; ++j) (*p->grad)[i * w + j] += g[i * total + off + j];
                }
                off += w;
            }
        });
    }

    /// Per-row normalization: y = gamma * (x - mean) / sqrt(var + eps) + beta.
    TensorPtr layer_norm(const TensorPtr& x, const TensorPtr& gamma, const TensorPtr& beta, double eps = 1e-5) {
        if (x->ndim() != 2) detail::dim_error("layer_norm", x->shape, gamma->shape);
        const std::size_t n = x->shape[0], m = x->shape[1];
        if (gamma->numel() != m || beta->numel() != m) detail::dim_error("layer_norm", x->shape, gamma->shape);
        auto out = make_tensor({n, m});
        auto xhat = std::make_shared<std::vector<double>>(n * m);
        auto inv = std::make_shared<std::vector<double>>(n);
        for (std::size_t i = 0; i < n; ++i) {
            double mu = 0.0;
            for (std::size_t j = 0; j < m; ++j) mu += x->data[i * m + j];
            mu /= static_cast<double>(m);
            double var = 0.0;
            for (std::size_t j = 0; j < m; ++j) {
                const double d = x->data[i * m + j] - mu;
                var += d * d;
            }
            var /= static_cast<double>(m);
            const double iv = 1.0 / std::sqrt(var + eps);
            (*inv)[i] = iv;
            for (std::size_t j = 0; j < m; ++j) {
                const double h = (x->data[i * m + j] - mu) * iv;
                (*xhat)[i * m + j] = h;
                out->data[i * m + j] = gamma->data[j] * h + beta->data[j];
            }
        }
        return record(out, {x, gamma, beta}, [x, gamma, beta, out, xhat, inv, n, m] {
            const auto& g = *out->grad;
            if (gamma->requires_grad) {
                gamma->ensure_grad();
                for (std::size_t j = 0; j < m; ++j) {
                    double acc = 0.0;
                    for (std::size_t i = 0; i < n; ++i) acc += g[i * m + j] * (*xhat)[i * m + j];
                    (*gamma->grad)[j] += acc;
                }
            }
            if (beta->requires_grad) {
                beta->ensure_grad();
                for (std::size_t j = 0; j < m; ++j) {
                    double acc = 0.0;
                    for (std::size_t i = 0; i < n; ++i) acc += g[i * m + j];
                    (*beta->grad)[j] += acc;
                }
            }
            if (x->requires_grad) {
                x->ensure_grad();
                for (std::size_t i = 0; i < n; ++i) {
                    double m1 = 0.0, m2 = 0.0;
                    for (std::size_t j = 0; j < m; ++j) {
                        const double h = g[i * m + j] * gamma->data[j];
                        m1 += h;
                        m2 += h * (*xhat)[i * m + j];
                    }
                    m1 /= static_cast<double>(m);
                    m2 /= static_cast<double>(m);
                    for (std::size_t j = 0; j < m; ++j) {
                        const double h = g[i * m + j] * gamma->data[j];
                        (*x->grad)[i * m + j] += (*inv)[i] * (h - m1 - (*xhat)[i * m + j] * m2);
                    }
                }
            }
        });
    }

    // ---- backward ----

    /// Accumulate d(loss)/d(t) into every requires_grad tensor on the loss's
    /// ancestry. Tensors off the ancestry (and all requires_grad == false
    /// tensors) are left without a grad buffer.
    void backward(const TensorPtr& loss) {
        if (!loss || loss->numel() != 1)
            throw std::invalid_argument("backward: loss must be a scalar tensor");
        if (!loss->requires_grad) return; // detached from every parameter
        loss->ensure_grad();
        (*loss->grad)[0] += 1.0;
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it)
            if (it->out->grad) it->back();
    }

    std::size_t node_count() const { return nodes_.size(); }

    /// Scalars this trace holds beyond the model weights themselves: forward
    /// intermediates kept for backward, plus every gradient buffer backward
    /// materialized (parameter grads included — they scale with the trainable
    /// set the way optimizer state does). Call after backward for the full
    /// picture; before backward it counts retained intermediates only.
    std::size_t retained_scalars() const {
        std::unordered_set<const Tensor*> seen;
        std::size_t total = 0;
        auto visit = [&](const TensorPtr& t) {
            if (!seen.insert(t.get()).second) return;
            if (!t->leaf) total += t->numel();
            if (t->grad) total += t->grad->size();
        };
        for (const auto& n : nodes_) {
            visit(n.out);
            for (const auto& in : n.ins) visit(in);
        }
        return total;
    }

    /// Clear every gradient recorded anywhere on this tape, parameters included.
    void zero_all_grads() {
        for (auto& n : nodes_) {
            n.out->zero_grad();
            for (auto& in : n.ins) in->zero_grad();
        }
    }

    void clear() { nodes_.clear(); }

private:
    struct Node {
        TensorPtr out;
        std::vector<TensorPtr> ins;
        std::function<void()> back;
    };

    std::vector<Node> nodes_;

    TensorPtr record(const TensorPtr& out, std::vector<TensorPtr> ins, std::function<void()> back) {
        out->leaf = false;
        out->requires_grad = false;
        for (const auto& in : ins)
            if (in->requires_grad) {
                out->requires_grad = true;
                break;
            }
        if (out->requires_grad) nodes_.push_back(Node{out, std::move(ins), std::move(back)});
        return out;
    }

    TensorPtr binary_add(const TensorPtr& a, const TensorPtr& b, double sign) {
        const char* opname = sign > 0 ? "add" : "sub";
        // broadcast forms: scalar b, or 1-D bias b over a's trailing dim
        enum class Mode { same, scalar, bias } mode;
        if (a->shape == b->shape) {
            mode = Mode::same;
        } else if (b->numel() == 1) {
            mode = Mode::scalar;
        } else if (a->ndim() == 2 && b->ndim() == 1 && b->shape[0] == a->shape[1]) {
            mode = Mode::bias;
        } else {
            detail::dim_error(opname, a->shape, b->shape);
        }
        auto out = make_tensor(a->shape);
        const std::size_t n = a->numel();
        const std::size_t m = a->ndim() == 2 ? a->shape[1] : a->numel();
        for (std::size_t i = 0; i < n; ++i) {
            const double bv = mode == Mode::same ? b->data[i] : mode == Mode::scalar ? b->data[0] : b->data[i % m];
            out->data[i] = a->data[i] + sign * bv;
        }
        return record(out, {a, b}, [a, b, out, sign, mode, n, m] {
            const auto& g = *out->grad;
            if (a->requires_grad) {
                a->ensure_grad();
                for (std::size_t i = 0; i < n; ++i) (*a->grad)[i] += g[i];
            }
            if (b->requires_grad) {
                b->ensure_grad();
                auto& gb = *b->grad;
                for (std::size_t i = 0; i < n; ++i) {
                    const std::size_t k = mode == Mode::same ? i : mode == Mode::scalar ? 0 : i % m;
                    gb[k] += sign * g[i];
                }
            }
        });
    }

    template <typename F, typename G>
    TensorPtr unary(const TensorPtr& a, F f, G dfdx) {
        auto out = make_tensor(a->shape);
        for (std::size_t i = 0; i < a->numel(); ++i) out->data[i] = f(a->data[i]);
        return record(out, {a}, [a, out, dfdx] {
            const auto& g = *out->grad;
            a->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i)
                (*a->grad)[i] += g[i] * dfdx(a->data[i], out->data[i]);
        });
    }

    static void check_rowvec(const char* op, const TensorPtr& a, const TensorPtr& s) {
        if (a->ndim() != 2 || s->ndim() != 2 || s->shape[0] != a->shape[0] || s->shape[1] != 1)
            detail::dim_error(op, a->shape, s->shape);
    }
};

/// Zero the gradient buffers of a parameter set (buffers stay allocated).
inline void zero_grads(const std::vector<TensorPtr>& params) {
    for (const auto& p : params) p->zero_grad();
}

/// Central finite differences: (f(x + h e_i) - f(x - h e_i)) / 2h per
/// coordinate. `f` must be deterministic; the result is a plain leaf tensor.
inline TensorPtr finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x, double h = 1e-5) {
    if (!(h > 0.0)) throw std::invalid_argument("finite_diff_grad: step must be positive");
    Tensor probe = x;
    auto out = make_tensor(x.shape);
    for (std::size_t i = 0; i < x.numel(); ++i) {
        const double orig = probe.data[i];
        probe.data[i] = orig + h;
        const double fp = f(probe);
        probe.data[i] = orig - h;
        const double fm = f(probe);
        probe.data[i] = orig;
        out->data[i] = (fp - fm) / (2.0 * h);
    }
    return out;
}

} // namespace restune
