#pragma once

// Task-vector algebra: extraction, application, weighted averaging, task
// arithmetic, and DARE drop-and-rescale. All arithmetic is F32 with
// sequential ascending-index accumulation so results are bit-reproducible.

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ckmerge/tensorio.hpp"

namespace ckmerge {

struct FloatTensor {
    std::vector<std::size_t> shape;
    std::vector<float>       values;

    bool operator==(const FloatTensor &) const = default;
};

struct TaskVector {
    uint64_t base_fingerprint = 0;    // digest of the initialization checkpoint
    uint64_t source_fingerprint = 0;  // digest of the tuned checkpoint
    std::map<std::string, FloatTensor> deltas;

    bool operator==(const TaskVector &) const = default;
};

struct AveragingWeights {
    std::vector<double> weights;

    // Two-model convenience form: (w, 1 - w), w validated to [0, 1].
    static AveragingWeights two_model(double w);
};

// deltas[name][i] = f32(tuned[name][i]) - f32(base[name][i]).
TaskVector compute_task_vector(const Checkpoint & tuned, const Checkpoint & base);

// out = f32(base) + float(scale) * delta, narrowed back to each tensor's
// base dtype (or output_dtype when given). scale = 0 reproduces the base
// payload bit-for-bit. The task vector must have been computed against this
// base unless allow_base_mismatch is set.
Checkpoint apply_task_vector(const Checkpoint & base, const TaskVector & tv, double scale,
                             bool allow_base_mismatch = false,
                             std::optional<Dtype> output_dtype = std::nullopt);

// Shared elementwise kernel: values[i] += float(scale) * delta[i]; a zero
// scale leaves values untouched (preserving -0.0 payloads exactly).
void apply_delta_inplace(std::vector<float> & values, const std::vector<float> & delta,
                         double scale);

// out = sum_i float(w_i) * f32(models[i]), accumulated in ascending model
// index. Output dtype per tensor follows the first model.
Checkpoint weighted_average(const std::vector<Checkpoint> & models,
                            const AveragingWeights & weights);

// Sum of scaled task vectors: sum_i float(c_i) * tv_i, ascending index.
TaskVector combine_task_vectors(const std::vector<TaskVector> & tvs,
                                const std::vector<double> & coeffs);

// base + sum_i c_i * tv_i. All tvs must share base's fingerprint.
Checkpoint task_arithmetic_merge(const Checkpoint & base, const std::vector<TaskVector> & tvs,
                                 const std::vector<double> & coeffs,
                                 bool allow_base_mismatch = false);

// Each element is zeroed independently with probability p (deterministic
// keyed PRNG over seed, tensor name, flat index); survivors are scaled by
// float(1 / (1 - p)). Requires 0 <= p < 1.
TaskVector dare_drop(const TaskVector & tv, double p, uint64_t seed);

// Shared by dare_drop and the streaming engine: drop-and-rescale one
// tensor's delta in place.
void dare_drop_tensor(std::vector<float> & values, const std::string & name, double p,
                      uint64_t seed);

// Structure checks used across modules: identical tensor name sets and
// shapes. Throws ValidationError naming the first mismatch.
void check_same_structure(const Checkpoint & a, const Checkpoint & b,
                          const std::string & what);

} // namespace ckmerge
