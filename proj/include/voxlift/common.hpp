#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace voxlift {

using Vec3 = std::array<double, 3>;

inline Vec3 operator+(const Vec3& a, const Vec3& b) { return {a[0] + b[0], a[1] + b[1], a[2] + b[2]}; }
inline Vec3 operator-(const Vec3& a, const Vec3& b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
inline Vec3 operator*(const Vec3& a, double s) { return {a[0] * s, a[1] * s, a[2] * s}; }

inline double dot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }
inline Vec3 cross(const Vec3& a, const Vec3& b) {
    return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}
inline double norm(const Vec3& a) { return std::sqrt(dot(a, a)); }
inline double squared_distance(const Vec3& a, const Vec3& b) {
    const double dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
    return dx * dx + dy * dy + dz * dz;
}
inline Vec3 normalized(const Vec3& a) {
    const double n = norm(a);
    if (n == 0.0) throw std::invalid_argument("cannot normalize zero vector");
    return a * (1.0 / n);
}
inline bool is_finite(const Vec3& a) {
    return std::isfinite(a[0]) && std::isfinite(a[1]) && std::isfinite(a[2]);
}

/// Axis-aligned 3D bounding box, center + size in meters. Sizes must stay positive.
struct Box3D {
    Vec3 center{0, 0, 0};
    Vec3 size{1, 1, 1};

    double min(int axis) const { return center[axis] - 0.5 * size[axis]; }
    double max(int axis) const { return center[axis] + 0.5 * size[axis]; }
    double volume() const { return size[0] * size[1] * size[2]; }

    void validate() const {
        for (int a = 0; a < 3; ++a) {
            if (!(size[a] > 0.0) || !std::isfinite(size[a]) || !std::isfinite(center[a]))
                throw std::invalid_argument("Box3D: size components must be positive and finite");
        }
    }
};

/// Dense row-major matrix of doubles. The on-disk format is float32; widths are
/// small enough that double arithmetic in memory costs nothing and keeps the
/// gradient checks well away from float32 noise.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    double* row(std::size_t r) { return data_.data() + r * cols_; }
    const double* row(std::size_t r) const { return data_.data() + r * cols_; }

    std::vector<double>& data() { return data_; }
    const std::vector<double>& data() const { return data_; }

    Vec3 row3(std::size_t r) const {
        const double* p = row(r);
        return {p[0], p[1], p[2]};
    }
    void set_row3(std::size_t r, const Vec3& v) {
        double* p = row(r);
        p[0] = v[0];
        p[1] = v[1];
        p[2] = v[2];
    }

    static Matrix from_rows(const std::vector<Vec3>& pts) {
        Matrix m(pts.size(), 3);
        for (std::size_t i = 0; i < pts.size(); ++i) m.set_row3(i, pts[i]);
        return m;
    }

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

/// y = x · W for a row vector x (len = W.rows()); y has len W.cols().
inline void matvec_row(const double* x, const Matrix& w, double* y) {
    for (std::size_t c = 0; c < w.cols(); ++c) y[c] = 0.0;
    for (std::size_t r = 0; r < w.rows(); ++r) {
        const double xv = x[r];
        if (xv == 0.0) continue;
        const double* wr = w.row(r);
        for (std::size_t c = 0; c < w.cols(); ++c) y[c] += xv * wr[c];
    }
}

inline double dot_n(const double* a, const double* b, std::size_t n) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
    return s;
}

inline double softplus(double x) {
    // log(1+e^x), stable on both tails
    if (x > 30.0) return x;
    if (x < -30.0) return std::exp(x);
    return std::log1p(std::exp(x));
}

inline double sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

/// splitmix64: tiny deterministic generator. std::mt19937 distributions are not
/// pinned across standard libraries, and serialized artifacts must be
/// byte-identical, so all randomness in the data path flows through this.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    /// uniform in [0, 1)
    double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

    std::uint64_t next_below(std::uint64_t n) { return next_u64() % n; }

    /// standard normal via Box-Muller; the spare is cached so the stream is a
    /// pure function of the seed and call count
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        do {
            u1 = next_double();
        } while (u1 <= 0.0);
        const double u2 = next_double();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

private:
    std::uint64_t state_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

/// Derive an independent stream from (seed, stream id).
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t z = seed ^ (stream + 0x9e3779b97f4a7c15ULL + (seed << 6) + (seed >> 2));
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline int resolve_threads(int requested) {
    if (requested > 0) return requested;
    const unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw);
}

/// Run fn(begin, end) over a partition of [0, n). Each range writes disjoint
/// outputs and every per-element reduction is sequential, so results are
/// identical for any thread count.
template <typename Fn>
void parallel_for(std::size_t n, int threads, Fn&& fn) {
    threads = resolve_threads(threads);
    if (threads <= 1 || n < 2) {
        fn(std::size_t{0}, n);
        return;
    }
    const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(threads), n);
    const std::size_t chunk = (n + workers - 1) / workers;
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) {
        const std::size_t begin = w * chunk;
        const std::size_t end = std::min(n, begin + chunk);
        if (begin >= end) break;
        pool.emplace_back([&fn, begin, end] { fn(begin, end); });
    }
    for (auto& t : pool) t.join();
}

}  // namespace voxlift
