#pragma once

#include <bit>
#include <cassert>
#include <cstddef>
#include <span>
#include <vector>

namespace crystal {

/// Complete binary tree of partial sums over nonnegative weights.
/// Point updates and weighted sampling are O(log n). Internal nodes are
/// always recomputed from their children, so no rounding drift builds up.
template <typename T = double>
class SumTree {
public:
    SumTree() = default;

    explicit SumTree(std::size_t n) { resize(n); }

    explicit SumTree(std::span<const T> weights) {
        resize(weights.size());
        for (std::size_t i = 0; i < weights.size(); ++i) tree_[leaves_ + i] = weights[i];
        for (std::size_t k = leaves_ - 1; k >= 1; --k) tree_[k] = tree_[2 * k] + tree_[2 * k + 1];
    }

    void resize(std::size_t n) {
        size_ = n;
        leaves_ = std::bit_ceil(n < 1 ? std::size_t{1} : n);
        tree_.assign(2 * leaves_, T{});
    }

    std::size_t size() const noexcept { return size_; }
    T total() const noexcept { return tree_[1]; }
    T weight(std::size_t i) const { return tree_[leaves_ + i]; }

    void set(std::size_t i, T w) {
        assert(i < size_);
        std::size_t k = leaves_ + i;
        tree_[k] = w;
        for (k /= 2; k >= 1; k /= 2) tree_[k] = tree_[2 * k] + tree_[2 * k + 1];
    }

    /// Writes leaf i without touching its ancestors; follow with repair().
    void assign(std::size_t i, T w) {
        assert(i < size_);
        tree_[leaves_ + i] = w;
    }

    /// Recomputes the ancestors of leaves [lo, hi].
    void repair(std::size_t lo, std::size_t hi) {
        assert(lo <= hi && hi < size_);
        std::size_t a = (leaves_ + lo) / 2, b = (leaves_ + hi) / 2;
        for (; a >= 1; a /= 2, b /= 2) {
            for (std::size_t k = a; k <= b; ++k) tree_[k] = tree_[2 * k] + tree_[2 * k + 1];
        }
    }

    /// Sum of weights[0..i).
    T prefix(std::size_t i) const {
        T s{};
        for (std::size_t j = 0; j < i; ++j) s += weight(j);
        return s;
    }

    /// Index i with prefix(i) <= target < prefix(i+1), for target in [0, total()).
    std::size_t find(T target) const {
        std::size_t k = 1;
        while (k < leaves_) {
            const T left = tree_[2 * k];
            if (target < left) {
                k = 2 * k;
            } else {
                target -= left;
                k = 2 * k + 1;
            }
        }
        std::size_t i = k - leaves_;
        // Rounding in the subtractions can land on a zero-weight or padding leaf.
        if (i >= size_ || weight(i) <= T{}) i = nearest_positive(i);
        return i;
    }

private:
    std::size_t nearest_positive(std::size_t i) const {
        for (std::size_t d = 1; d <= size_; ++d) {
            if (i >= d && i - d < size_ && weight(i - d) > T{}) return i - d;
            if (i + d < size_ && weight(i + d) > T{}) return i + d;
        }
        return i < size_ ? i : size_ - 1;
    }

    std::size_t size_ = 0;
    std::size_t leaves_ = 1;
    std::vector<T> tree_ = std::vector<T>(2, T{});
};

}  // namespace crystal
