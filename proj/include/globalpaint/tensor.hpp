#pragma once

#include <algorithm>
#include <cassert>
#include <initializer_list>
#include <numeric>
#include <sstream>

#include "globalpaint/core.hpp"

namespace gp {

// Dense row-major n-d tensor. Plain value type: copy copies the buffer.
template <class S>
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
        data_.assign(static_cast<size_t>(count(shape_)), S(0));
    }

    Tensor(std::vector<int> shape, std::vector<S> data) : shape_(std::move(shape)), data_(std::move(data)) {
        check_contract(static_cast<int64_t>(data_.size()) == count(shape_), "tensor: data/shape mismatch");
    }

    static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

    static Tensor full(std::vector<int> shape, S v) {
        Tensor t(std::move(shape));
        std::fill(t.data_.begin(), t.data_.end(), v);
        return t;
    }

    static Tensor randn(std::vector<int> shape, Rng& rng, S stddev = S(1)) {
        Tensor t(std::move(shape));
        for (auto& x : t.data_) x = static_cast<S>(rng.normal()) * stddev;
        return t;
    }

    static Tensor rand_uniform(std::vector<int> shape, Rng& rng, S lo, S hi) {
        Tensor t(std::move(shape));
        for (auto& x : t.data_) x = static_cast<S>(rng.uniform(lo, hi));
        return t;
    }

    const std::vector<int>& shape() const { return shape_; }
    int ndim() const { return static_cast<int>(shape_.size()); }

    int dim(int i) const {
        if (i < 0) i += ndim();
        assert(i >= 0 && i < ndim());
        return shape_[i];
    }

    int64_t numel() const { return static_cast<int64_t>(data_.size()); }
    bool empty() const { return data_.empty(); }

    S* data() { return data_.data(); }
    const S* data() const { return data_.data(); }

    S& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
    const S& operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

    template <class... Ix>
    S& at(Ix... ix) {
        return data_[flat_index({static_cast<int64_t>(ix)...})];
    }
    template <class... Ix>
    const S& at(Ix... ix) const {
        return data_[flat_index({static_cast<int64_t>(ix)...})];
    }

    void fill(S v) { std::fill(data_.begin(), data_.end(), v); }

    void zero() { fill(S(0)); }

    Tensor reshaped(std::vector<int> shape) const {
        check_contract(count(shape) == numel(), "reshape: element count mismatch");
        Tensor t = *this;
        t.shape_ = std::move(shape);
        return t;
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    bool all_finite() const {
        for (const auto& v : data_)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    S max_abs() const {
        S m = S(0);
        for (const auto& v : data_) m = std::max(m, static_cast<S>(std::abs(static_cast<double>(v))));
        return m;
    }

    static int64_t count(const std::vector<int>& shape) {
        int64_t n = 1;
        for (int d : shape) {
            check_contract(d >= 0, "tensor: negative dim");
            n *= d;
        }
        return n;
    }

    static std::string shape_str(const std::vector<int>& shape) {
        std::ostringstream os;
        os << "(";
        for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
        os << ")";
        return os.str();
    }

private:
    size_t flat_index(std::initializer_list<int64_t> ix) const {
        assert(static_cast<int>(ix.size()) == ndim());
        int64_t flat = 0;
        int i        = 0;
        for (int64_t v : ix) {
            assert(v >= 0 && v < shape_[i]);
            flat = flat * shape_[i] + v;
            ++i;
        }
        return static_cast<size_t>(flat);
    }

    std::vector<int> shape_;
    std::vector<S> data_;
};

template <class S>
double max_abs_diff(const Tensor<S>& a, const Tensor<S>& b) {
    check_contract(a.same_shape(b), "max_abs_diff: shape mismatch");
    double m = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i)
        m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
    return m;
}

}  // namespace gp
