#include "ckmerge/trimsel.hpp"

#include <cmath>

#include "ckmerge/errors.hpp"

namespace ckmerge {

std::pair<uint32_t, uint64_t> pick_bucket(const SelHist & h, uint64_t n, bool descending) {
    uint64_t outside = 0;
    if (descending) {
        for (int b = 65535; b >= 0; --b) {
            uint64_t c = h.count[std::size_t(b)];
            if (outside + c >= n) return {uint32_t(b), outside};
            outside += c;
        }
    } else {
        for (int b = 0; b < 65536; ++b) {
            uint64_t c = h.count[std::size_t(b)];
            if (outside + c >= n) return {uint32_t(b), outside};
            outside += c;
        }
    }
    throw ValidationError("selection rank exceeds population");
}

SelectBoundary resolve_boundary(uint64_t n, uint64_t total, uint32_t bucket,
                                uint64_t n_outside_bucket, const SelHist & fine,
                                bool descending) {
    SelectBoundary out;
    if (n == 0) {
        out.select_none = true;
        return out;
    }
    if (n >= total) {
        out.select_all = true;
        return out;
    }
    auto [fb, fine_outside] = pick_bucket(fine, n - n_outside_bucket, descending);
    out.key = (bucket << 16) | fb;
    out.n_strict = n_outside_bucket + fine_outside;
    out.budget = n - out.n_strict;
    return out;
}

SelectBoundary select_topk_abs(std::span<const float> values, uint64_t n_keep) {
    SelectBoundary out;
    if (n_keep == 0) {
        out.select_none = true;
        return out;
    }
    if (n_keep >= values.size()) {
        out.select_all = true;
        return out;
    }
    SelHist coarse;
    for (float v : values) coarse.count[coarse_of(abs_key(v))]++;
    auto [bucket, outside] = pick_bucket(coarse, n_keep, true);
    SelHist fine;
    for (float v : values) {
        uint32_t key = abs_key(v);
        if (coarse_of(key) == bucket) fine.count[fine_of(key)]++;
    }
    return resolve_boundary(n_keep, values.size(), bucket, outside, fine, true);
}

uint64_t apply_trim_boundary(std::span<float> values, const SelectBoundary & b,
                             uint64_t budget, BitMask * mask) {
    if (b.select_all) {
        if (mask)
            for (std::size_t i = 0; i < values.size(); ++i) mask->set(i);
        return values.size();
    }
    if (b.select_none) {
        for (float & v : values) v = 0.0f;
        return 0;
    }
    uint64_t kept = 0;
    for (std::size_t i = 0; i < values.size(); ++i) {
        uint32_t key = abs_key(values[i]);
        bool keep = key > b.key;
        if (!keep && key == b.key && budget > 0) {
            keep = true;
            --budget;
        }
        if (keep) {
            ++kept;
            if (mask) mask->set(i);
        } else {
            values[i] = 0.0f;
        }
    }
    return kept;
}

uint64_t count_abs_eq(std::span<const float> values, uint32_t key) {
    uint64_t c = 0;
    for (float v : values)
        if (abs_key(v) == key) ++c;
    return c;
}

uint64_t trim_keep_count(double k, uint64_t numel) {
    if (k == 0.0 || numel == 0) return 0;
    uint64_t n = uint64_t(std::llround(k * double(numel)));
    if (n < 1) n = 1;
    if (n > numel) n = numel;
    return n;
}

void ConflictCounts::add(const ConflictCounts & o) {
    retained_protected += o.retained_protected;
    retained_other += o.retained_other;
    overlap += o.overlap;
    conflicts += o.conflicts;
    discarded_protected += o.discarded_protected;
    discarded_other += o.discarded_other;
    zero_sum_ties += o.zero_sum_ties;
}

ConflictCounts count_conflicts(std::span<const float> protected_values,
                               std::span<const float> other_values,
                               const BitMask & protected_kept, const BitMask & other_kept) {
    ConflictCounts c;
    for (std::size_t i = 0; i < protected_values.size(); ++i) {
        const bool kp = protected_kept.get(i);
        const bool ko = other_kept.get(i);
        c.retained_protected += kp;
        c.retained_other += ko;
        c.overlap += kp && ko;
        const float a = protected_values[i];
        const float b = other_values[i];
        if (a != 0.0f && b != 0.0f && (a > 0.0f) != (b > 0.0f)) {
            ++c.conflicts;
            const uint32_t ka = abs_key(a), kb = abs_key(b);
            if (ka < kb)
                ++c.discarded_protected;
            else if (kb < ka)
                ++c.discarded_other;
            else
                ++c.zero_sum_ties;
        }
    }
    return c;
}

} // namespace ckmerge
