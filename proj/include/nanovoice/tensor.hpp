#pragma once

// Dense row-major float64 arrays and the handful of kernels the adapter,
// diffusion and score-network code needs. Every kernel checks shapes up
// front (no implicit broadcasting) and rejects non-finite results.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "nanovoice/errors.hpp"

namespace nanovoice {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << ']';
    return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape, double fill = 0.0)
        : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

    Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (data_.size() != shape_numel(shape_))
            throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                                 " does not match shape " + shape_str(shape_));
    }

    /// 2-D literal, e.g. Tensor::matrix({{1, 2}, {3, 4}}).
    static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows) {
        const std::size_t m = rows.size();
        const std::size_t n = m ? rows.begin()->size() : 0;
        Tensor t({m, n});
        std::size_t i = 0;
        for (const auto& row : rows) {
            if (row.size() != n) throw DimensionError("ragged matrix literal");
            std::copy(row.begin(), row.end(), t.data_.begin() + static_cast<std::ptrdiff_t>(i * n));
            ++i;
        }
        return t;
    }

    static Tensor identity(std::size_t n) {
        Tensor t({n, n});
        for (std::size_t i = 0; i < n; ++i) t.data_[i * n + i] = 1.0;
        return t;
    }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    std::span<double> values() noexcept { return data_; }
    std::span<const double> values() const noexcept { return data_; }
    double* data() noexcept { return data_.data(); }
    const double* data() const noexcept { return data_.data(); }
    const std::vector<double>& storage() const noexcept { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    double& operator()(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
    double operator()(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }

    double& operator()(std::size_t n, std::size_t i, std::size_t j) {
        return data_[(n * shape_[1] + i) * shape_[2] + j];
    }
    double operator()(std::size_t n, std::size_t i, std::size_t j) const {
        return data_[(n * shape_[1] + i) * shape_[2] + j];
    }

    /// Same data, new shape with equal element count.
    Tensor reshaped(Shape shape) const {
        if (shape_numel(shape) != data_.size())
            throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
        return Tensor(std::move(shape), data_);
    }

    /// Copy of slice n along the leading axis.
    Tensor slice(std::size_t n) const {
        if (rank() < 2 || n >= shape_[0])
            throw DimensionError("slice " + std::to_string(n) + " out of range for " + shape_str(shape_));
        Shape sub(shape_.begin() + 1, shape_.end());
        const std::size_t len = shape_numel(sub);
        auto first = data_.begin() + static_cast<std::ptrdiff_t>(n * len);
        return Tensor(std::move(sub), std::vector<double>(first, first + static_cast<std::ptrdiff_t>(len)));
    }

    std::span<double> slice_view(std::size_t n) {
        const std::size_t len = data_.size() / shape_.at(0);
        return std::span<double>(data_).subspan(n * len, len);
    }
    std::span<const double> slice_view(std::size_t n) const {
        const std::size_t len = data_.size() / shape_.at(0);
        return std::span<const double>(data_).subspan(n * len, len);
    }

    /// Overwrite slice n along the leading axis.
    void set_slice(std::size_t n, const Tensor& src) {
        if (rank() < 2 || n >= shape_[0] || src.size() * shape_[0] != data_.size())
            throw DimensionError("set_slice " + shape_str(src.shape()) + " into " + shape_str(shape_));
        std::copy(src.data_.begin(), src.data_.end(),
                  data_.begin() + static_cast<std::ptrdiff_t>(n * src.size()));
    }

    void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

    Tensor& operator+=(const Tensor& o);
    Tensor& operator-=(const Tensor& o);
    Tensor& operator*=(double s) {
        for (double& v : data_) v *= s;
        return *this;
    }

    bool operator==(const Tensor& o) const { return shape_ == o.shape_ && data_ == o.data_; }

private:
    Shape shape_;
    std::vector<double> data_;
};

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(op) + ": shape " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
}

inline void require_rank(const Tensor& a, std::size_t r, const char* op) {
    if (a.rank() != r)
        throw DimensionError(std::string(op) + ": expected rank " + std::to_string(r) + ", got " +
                             shape_str(a.shape()));
}

inline bool all_finite(std::span<const double> v) {
    return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

/// Throws NonFiniteError naming `op` if any element is NaN/Inf.
inline const Tensor& check_finite(const Tensor& t, const char* op) {
    if (!all_finite(t.values())) throw NonFiniteError(std::string(op) + ": non-finite result");
    return t;
}

inline Tensor& Tensor::operator+=(const Tensor& o) {
    require_same_shape(*this, o, "add");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
}

inline Tensor& Tensor::operator-=(const Tensor& o) {
    require_same_shape(*this, o, "sub");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
    return *this;
}

inline Tensor operator+(Tensor a, const Tensor& b) {
    a += b;
    return a;
}
inline Tensor operator-(Tensor a, const Tensor& b) {
    a -= b;
    return a;
}
inline Tensor operator*(Tensor a, double s) {
    a *= s;
    return a;
}
inline Tensor operator*(double s, Tensor a) {
    a *= s;
    return a;
}

/// Elementwise product.
inline Tensor hadamard(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "hadamard");
    Tensor out(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
    return out;
}

/// y += s * x
inline void axpy(double s, const Tensor& x, Tensor& y) {
    require_same_shape(x, y, "axpy");
    double* yd = y.data();
    const double* xd = x.data();
    for (std::size_t i = 0; i < x.size(); ++i) yd[i] += s * xd[i];
}

inline double sum(const Tensor& a) {
    double s = 0.0;
    for (double v : a.values()) s += v;
    return s;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw DimensionError("dot: length mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double max_abs(const Tensor& a) {
    double m = 0.0;
    for (double v : a.values()) m = std::max(m, std::abs(v));
    return m;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "max_abs_diff");
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

namespace detail {

// C[m×q] (+)= A[m×p] · B[p×q], raw row-major buffers. i-k-j order keeps the
// inner loop contiguous in both B and C.
inline void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t p,
                    std::size_t q, bool accumulate) {
    if (!accumulate) std::fill(c, c + m * q, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        double* ci = c + i * q;
        const double* ai = a + i * p;
        for (std::size_t k = 0; k < p; ++k) {
            const double aik = ai[k];
            const double* bk = b + k * q;
            for (std::size_t j = 0; j < q; ++j) ci[j] += aik * bk[j];
        }
    }
}

// C[m×q] (+)= A[m×p] · B[q×p]^T
inline void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t p,
                    std::size_t q, bool accumulate) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* ai = a + i * p;
        double* ci = c + i * q;
        for (std::size_t j = 0; j < q; ++j) {
            const double* bj = b + j * p;
            double s = 0.0;
            for (std::size_t k = 0; k < p; ++k) s += ai[k] * bj[k];
            ci[j] = accumulate ? ci[j] + s : s;
        }
    }
}

// C[p×q] (+)= A[m×p]^T · B[m×q]
inline void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t p,
                    std::size_t q, bool accumulate) {
    if (!accumulate) std::fill(c, c + p * q, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        const double* ai = a + i * p;
        const double* bi = b + i * q;
        for (std::size_t k = 0; k < p; ++k) {
            const double aik = ai[k];
            double* ck = c + k * q;
            for (std::size_t j = 0; j < q; ++j) ck[j] += aik * bi[j];
        }
    }
}

}  // namespace detail

/// Standard product a[m×p] · b[p×q].
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    require_rank(a, 2, "matmul");
    require_rank(b, 2, "matmul");
    if (a.dim(1) != b.dim(0))
        throw DimensionError("matmul: inner dimensions " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
    Tensor c({a.dim(0), b.dim(1)});
    detail::gemm_nn(a.data(), b.data(), c.data(), a.dim(0), a.dim(1), b.dim(1), false);
    check_finite(c, "matmul");
    return c;
}

/// a[m×p] · b[q×p]^T, the row-vector form of a linear layer.
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    require_rank(a, 2, "matmul_nt");
    require_rank(b, 2, "matmul_nt");
    if (a.dim(1) != b.dim(1))
        throw DimensionError("matmul_nt: " + shape_str(a.shape()) + " x " + shape_str(b.shape()) + "^T");
    Tensor c({a.dim(0), b.dim(0)});
    detail::gemm_nt(a.data(), b.data(), c.data(), a.dim(0), a.dim(1), b.dim(0), false);
    check_finite(c, "matmul_nt");
    return c;
}

/// a[m×p]^T · b[m×q].
inline Tensor matmul_tn(const Tensor& a, const Tensor& b) {
    require_rank(a, 2, "matmul_tn");
    require_rank(b, 2, "matmul_tn");
    if (a.dim(0) != b.dim(0))
        throw DimensionError("matmul_tn: " + shape_str(a.shape()) + "^T x " + shape_str(b.shape()));
    Tensor c({a.dim(1), b.dim(1)});
    detail::gemm_tn(a.data(), b.data(), c.data(), a.dim(0), a.dim(1), b.dim(1), false);
    check_finite(c, "matmul_tn");
    return c;
}

/// out[n] = a[n] · b[n] for every n; slices never mix.
inline Tensor batched_matmul(const Tensor& a, const Tensor& b) {
    require_rank(a, 3, "batched_matmul");
    require_rank(b, 3, "batched_matmul");
    if (a.dim(0) != b.dim(0))
        throw DimensionError("batched_matmul: batch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    if (a.dim(2) != b.dim(1))
        throw DimensionError("batched_matmul: inner dimensions " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
    const std::size_t n = a.dim(0), m = a.dim(1), p = a.dim(2), q = b.dim(2);
    Tensor c({n, m, q});
    for (std::size_t s = 0; s < n; ++s)
        detail::gemm_nn(a.data() + s * m * p, b.data() + s * p * q, c.data() + s * m * q, m, p, q, false);
    check_finite(c, "batched_matmul");
    return c;
}

inline Tensor transpose(const Tensor& a) {
    require_rank(a, 2, "transpose");
    Tensor t({a.dim(1), a.dim(0)});
    for (std::size_t i = 0; i < a.dim(0); ++i)
        for (std::size_t j = 0; j < a.dim(1); ++j) t(j, i) = a(i, j);
    return t;
}

/// Euclidean norm of every column of a d×k matrix, as a 1×k row.
inline Tensor column_norms(const Tensor& v) {
    require_rank(v, 2, "column_norms");
    const std::size_t d = v.dim(0), k = v.dim(1);
    Tensor sq({1, k});
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = 0; j < k; ++j) sq[j] += v(i, j) * v(i, j);
    for (std::size_t j = 0; j < k; ++j) sq[j] = std::sqrt(sq[j]);
    check_finite(sq, "column_norms");
    return sq;
}

}  // namespace nanovoice
