#pragma once

// Per-tensor elementwise kernels shared by the in-memory operations and the
// streaming engine; using one implementation for both is what makes their
// outputs bit-identical.

#include <cstddef>
#include <cstdint>
#include <vector>

#include "ckmerge/trimsel.hpp"

namespace ckmerge {

// gamma[i] = sgn(sum over models of taus[m][i]), F32 ascending model index.
inline void kern_elect(const std::vector<const float *> & taus, std::size_t n,
                       int8_t * gamma) {
    for (std::size_t i = 0; i < n; ++i) {
        float sum = 0.0f;
        for (const float * tau : taus) sum = sum + tau[i];
        gamma[i] = fsign(sum);
    }
}

// out[i] = mean of the sign-matching nonzero values (ascending-index sum over
// models divided by the match count), 0 where none match or gamma is 0.
// With normalize, divide by the number of models retaining position i.
inline void kern_disjoint(const std::vector<const float *> & taus,
                          const std::vector<const BitMask *> & kept, const int8_t * gamma,
                          bool normalize, std::size_t n, float * out) {
    for (std::size_t i = 0; i < n; ++i) {
        if (gamma[i] == 0) {
            out[i] = 0.0f;
            continue;
        }
        float sum = 0.0f;
        uint32_t matched = 0;
        uint32_t retaining = 0;
        for (std::size_t m = 0; m < taus.size(); ++m) {
            const float v = taus[m][i];
            if (normalize && kept[m]->get(i)) ++retaining;
            if (v != 0.0f && fsign(v) == gamma[i]) {
                sum = sum + v;
                ++matched;
            }
        }
        if (matched == 0) {
            out[i] = 0.0f;
            continue;
        }
        const uint32_t denom = normalize ? retaining : matched;
        out[i] = sum / float(denom);
    }
}

} // namespace ckmerge
