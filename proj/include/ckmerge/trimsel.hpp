#pragma once

// Exact selection kernels shared by trimming, slack ranking, and the
// streaming engine. IEEE-754 magnitude order equals unsigned order of the
// absolute-value bit pattern, so exact k-th order statistics are found with
// two-level 16-bit histograms over 32-bit keys — no sorting, no sampling.
// Histogram accumulation is commutative integer addition, which makes the
// parallel two-phase (gather, then decide) path bit-identical to the
// sequential one.

#include <bit>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

namespace ckmerge {

// Key whose unsigned order equals |v| order; top bit is always clear.
inline uint32_t abs_key(float v) {
    return std::bit_cast<uint32_t>(v) & 0x7FFFFFFFu;
}

// Key for a non-negative float; unsigned order equals value order.
inline uint32_t pos_key(float v) {
    return std::bit_cast<uint32_t>(v);
}

// One histogram level: 2^16 buckets of exact counts.
struct SelHist {
    std::vector<uint64_t> count = std::vector<uint64_t>(65536, 0);

    void add(const SelHist & other) {
        for (std::size_t i = 0; i < count.size(); ++i) count[i] += other.count[i];
    }
    uint64_t total() const {
        uint64_t t = 0;
        for (uint64_t c : count) t += c;
        return t;
    }
};

inline uint32_t coarse_of(uint32_t key) { return key >> 16; }
inline uint32_t fine_of(uint32_t key) { return key & 0xFFFFu; }

// Bucket containing the n-th element counting from the top (descending) or
// bottom (ascending), plus the number of elements strictly beyond it.
// Pre: 1 <= n <= total count in the histogram.
std::pair<uint32_t, uint64_t> pick_bucket(const SelHist & h, uint64_t n, bool descending);

// Boundary of an exact selection: elements strictly inside (key > boundary
// for descending, key < boundary for ascending) are all selected; exactly
// `budget` elements with key == boundary are selected, taken in ascending
// (tensor name, flat index) order.
struct SelectBoundary {
    bool     select_all = false;
    bool     select_none = false;
    uint32_t key = 0;
    uint64_t n_strict = 0;
    uint64_t budget = 0;
};

// In-memory single-tensor top-n_keep selection by |value|.
SelectBoundary select_topk_abs(std::span<const float> values, uint64_t n_keep);

// Resolve a boundary from pre-accumulated histograms (the streaming path).
// fine must hold fine-bucket counts of keys whose coarse bucket is `bucket`.
SelectBoundary resolve_boundary(uint64_t n, uint64_t total, uint32_t bucket,
                                uint64_t n_outside_bucket, const SelHist & fine,
                                bool descending);

// Bit-packed per-element keep mask.
class BitMask {
public:
    BitMask() = default;
    explicit BitMask(std::size_t n) : n_(n), w_((n + 63) / 64, 0) {}

    std::size_t size() const { return n_; }
    bool get(std::size_t i) const { return (w_[i >> 6] >> (i & 63)) & 1; }
    void set(std::size_t i) { w_[i >> 6] |= uint64_t(1) << (i & 63); }

    uint64_t count() const {
        uint64_t c = 0;
        for (uint64_t w : w_) c += uint64_t(std::popcount(w));
        return c;
    }

    bool operator==(const BitMask &) const = default;

private:
    std::size_t           n_ = 0;
    std::vector<uint64_t> w_;
};

// Zero every non-kept element: keep key > boundary, plus the first `budget`
// elements (ascending flat index) with key == boundary. Returns the number
// of kept positions; fills `mask` when non-null.
uint64_t apply_trim_boundary(std::span<float> values, const SelectBoundary & b,
                             uint64_t budget, BitMask * mask);

// Count elements whose abs_key equals `key`.
uint64_t count_abs_eq(std::span<const float> values, uint32_t key);

// The retained-count rule: k = 0 keeps nothing, k > 0 keeps
// max(1, round(k * numel)) capped at numel.
uint64_t trim_keep_count(double k, uint64_t numel);

inline int8_t fsign(float v) { return int8_t((v > 0.0f) - (v < 0.0f)); }

// Discard candidacy of a protected value a against the other value b:
// both nonzero, opposite signs, strictly smaller magnitude. Equal-magnitude
// conflicts are zero-sum ties, not candidates.
inline bool discard_candidate(float a, float b) {
    return a != 0.0f && b != 0.0f && ((a > 0.0f) != (b > 0.0f)) &&
           abs_key(a) < abs_key(b);
}

// Ranking key for a discard candidate: the magnitude deficit |b| - |a|,
// strictly positive in F32 whenever |a| < |b|.
inline uint32_t deficit_key(float a, float b) {
    return pos_key(std::fabs(b) - std::fabs(a));
}

// Sign-conflict partition between two trimmed deltas. conflicts ==
// discarded_protected + discarded_other + zero_sum_ties by construction.
struct ConflictCounts {
    uint64_t retained_protected = 0;
    uint64_t retained_other = 0;
    uint64_t overlap = 0;              // positions retained by both
    uint64_t conflicts = 0;            // overlap positions with opposite signs
    uint64_t discarded_protected = 0;  // protected loses: strictly smaller |value|
    uint64_t discarded_other = 0;
    uint64_t zero_sum_ties = 0;        // equal magnitudes cancel exactly

    void add(const ConflictCounts & o);
    double discard_proportion() const {
        return retained_protected ? double(discarded_protected) / double(retained_protected)
                                  : 0.0;
    }
};

ConflictCounts count_conflicts(std::span<const float> protected_values,
                               std::span<const float> other_values,
                               const BitMask & protected_kept, const BitMask & other_kept);

} // namespace ckmerge
