#pragma once

// The TIES pipeline — trim, elect signs, disjoint merge, scale — generalized
// to n models, plus the slack-variable reservation variant that shields a
// protected model's parameters from sign election.

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ckmerge/taskvec.hpp"
#include "ckmerge/tensorio.hpp"
#include "ckmerge/trimsel.hpp"

namespace ckmerge {

enum class Granularity : uint8_t { PerTensor, Global };

Granularity granularity_from_name(const std::string & name);
const char * granularity_name(Granularity g);

struct TrimmedDelta {
    std::map<std::string, FloatTensor> deltas;   // zeros at discarded positions
    std::map<std::string, BitMask>     kept;     // a kept zero still counts as retained
    double                             density = 1.0;
    uint64_t                           retained_total = 0;
    std::map<std::string, uint64_t>    retained_per_tensor;
    uint64_t                           base_fingerprint = 0;
};

struct SignTensor {
    std::map<std::string, std::vector<int8_t>> signs;   // values in {-1, 0, +1}
};

struct SlackReservation {
    // Reserved flat indices per tensor, ascending. Every reserved position is
    // a genuine discard candidate of the protected model: sign conflict and
    // strictly smaller magnitude.
    std::map<std::string, std::vector<uint64_t>> reserved;
    uint64_t reserved_total = 0;
    double   slack_fraction = 0.0;
    int      protected_model = 0;
};

struct MergeRecipe {
    std::string              algorithm;   // weighted_average | task_arithmetic | ties | ties_sv | dare_ties
    std::string              base;        // checkpoint path; unused by weighted_average
    std::vector<std::string> models;      // checkpoint paths
    std::vector<double>      densities;   // k_i; reused as weights / coefficients
    double                   scale = 1.0;
    double                   slack = 0.0;       // ties_sv only
    int                      protected_model = 0;  // ties_sv only, 0-based
    Granularity              trim_granularity = Granularity::PerTensor;
    bool                     normalize = false;
    double                   drop_p = 0.0;      // dare variants
    uint64_t                 seed = 0;          // dare variants
    std::optional<Dtype>     output_dtype;

    // Parse from a JSON document; unknown keys are rejected. `require_paths`
    // additionally demands base/models entries be non-empty strings.
    static MergeRecipe from_json(const std::string & text);
    std::string to_json() const;

    // Structural validation independent of the filesystem.
    void validate() const;

    bool uses_task_vectors() const { return algorithm != "weighted_average"; }
    bool is_trim_algorithm() const {
        return algorithm == "ties" || algorithm == "ties_sv" || algorithm == "dare_ties";
    }
};

// Keep the top k-fraction of positions by |value| (see trim_keep_count for
// the exact rule). PerTensor ranks within each tensor; Global ranks across
// the whole delta, ties at the threshold broken by ascending (tensor name,
// flat index).
TrimmedDelta trim(const TaskVector & tv, double k, Granularity granularity);

// gamma^p = sgn(sum_i trimmed_i^p), summed in F32 ascending model index;
// exact zero sum gives 0.
SignTensor elect_signs(const std::vector<TrimmedDelta> & trimmed);

// Mean of the sign-matching nonzero values at each position; 0 where none
// match or the elected sign is 0. With normalize, divide by the number of
// models retaining the position instead of the match count.
TaskVector disjoint_merge(const std::vector<TrimmedDelta> & trimmed, const SignTensor & signs,
                          bool normalize = false);

// Two-model slack reservation: rank the protected model's discard candidates
// (sign conflict, strictly smaller magnitude) by magnitude deficit ascending
// and reserve the first min(|D|, round(s * protected.retained_total)).
SlackReservation slack_reserve(const TrimmedDelta & protected_delta,
                               const TrimmedDelta & other_delta, double s);

// Flip the elected sign to the protected model's sign at reserved positions.
void apply_reservation(SignTensor & signs, const TrimmedDelta & protected_delta,
                       const SlackReservation & reservation);

// In-memory pipeline over loaded checkpoints: dispatches on
// recipe.algorithm in {ties, ties_sv, dare_ties}.
Checkpoint ties_merge(const MergeRecipe & recipe, const Checkpoint & base,
                      const std::vector<Checkpoint> & models);

struct ModelRetention {
    std::string                     path;
    uint64_t                        retained_total = 0;
    std::map<std::string, uint64_t> per_tensor;
};

struct MergeManifest {
    MergeRecipe                   recipe;  // echo of the inputs
    uint64_t                      base_fingerprint = 0;  // 0 when no base is used
    std::vector<uint64_t>         model_fingerprints;
    uint64_t                      output_fingerprint = 0;
    std::vector<ModelRetention>   retention;         // trim algorithms only
    std::optional<ConflictCounts> conflict_summary;  // two-model trim algorithms
    uint64_t                      reserved_total = 0;  // ties_sv reservations

    std::string to_json() const;
};

// The streaming engine: reads the recipe's checkpoints tensor by tensor,
// merges with bounded memory, writes the output container plus a manifest
// file at <out_path>.manifest.json. Output bytes are identical for any
// thread count. threads = 0 uses the hardware concurrency.
MergeManifest run_recipe(const MergeRecipe & recipe, const std::filesystem::path & out_path,
                         int threads = 0);

} // namespace ckmerge
