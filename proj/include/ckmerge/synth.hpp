#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ckmerge/dtype.hpp"
#include "ckmerge/tensorio.hpp"

namespace ckmerge {

// Deterministic synthetic checkpoints. Every value is addressed by
// (seed, tensor name, flat index) through SplitMix64, so generation order
// never matters and two runs of the same spec are byte-identical anywhere.

struct SynthTensorSpec {
    std::string           name;
    std::vector<uint64_t> shape;
    Dtype                 dtype = Dtype::F32;
};

struct SynthSpec {
    uint64_t                     seed = 0;
    std::vector<SynthTensorSpec> tensors;

    // Value distribution: uniform in [-1, 1) by default, or every value
    // equal to `constant_value`.
    bool   constant = false;
    double constant_value = 0.0;

    // Conflict injection. When set, each generated value keeps its drawn
    // magnitude but takes the sign of the reference checkpoint's value at
    // the same position; then exactly llround(fraction * total element
    // count) positions, chosen by a second keyed stream, are flipped to the
    // opposite sign. Flips land only where both values are nonzero, so the
    // flipped count equals the sign-conflict count of the pair.
    std::optional<double> conflict_fraction;
    std::string           reference;  // checkpoint path; CLI resolves it

    // Series generation parameters (used by generate_ct_series callers).
    std::optional<uint64_t> series_steps;
    double                  series_growth = 1.0;

    static SynthSpec from_json(const std::string & text);
    void validate() const;
};

// Reference for conflict injection; required iff conflict_fraction is set.
Checkpoint generate_checkpoint(const SynthSpec & spec,
                               const Checkpoint * reference = nullptr);

// Checkpoint i (1-based, i = 1..steps) equals base + growth*i*tau for the
// spec's base checkpoint and a fixed uniform synthetic task vector drawn
// from a derived seed. growth = 0 copies the base bits.
std::vector<Checkpoint> generate_ct_series(const SynthSpec & spec, uint64_t steps,
                                           double growth,
                                           const Checkpoint * reference = nullptr);

} // namespace ckmerge
