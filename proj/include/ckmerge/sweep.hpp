#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ckmerge/ties.hpp"

namespace ckmerge {

// Grid search over merge-recipe fields with an external scoring hook.
//
// Swept field names: "scale", "slack", "drop_p", or "k<i>" for the i-th
// model's density (1-based). The hook command runs through the shell with
// every "{candidate}" replaced by the candidate checkpoint path (also in the
// MERGE_CANDIDATE environment variable); its last non-empty stdout line must
// parse as a finite decimal, higher better.

struct SweepSpec {
    MergeRecipe                                recipe_template;
    // Empty means the default: every model's density over
    // {0.01, 0.2, 0.4, 0.6, 0.8, 1.0}.
    std::map<std::string, std::vector<double>> grid;
    std::string                                eval_command;
    std::filesystem::path                      workdir = ".";
    bool                                       keep_candidates = false;
    std::optional<double>                      timeout_seconds;

    static SweepSpec from_json(const std::string & text);
    void validate() const;
};

// One grid point: (field, value) pairs ordered by field name.
using Assignment = std::vector<std::pair<std::string, double>>;

// Full Cartesian product, lexicographic in (sorted field name, value-list
// position): the first field steps slowest.
std::vector<Assignment> enumerate_grid(const SweepSpec & spec);

// The recipe template with one assignment applied.
MergeRecipe materialize(const MergeRecipe & recipe_template, const Assignment & assignment);

// Runs the hook on one candidate. Throws ValidationError on nonzero exit,
// non-numeric or non-finite output, or timeout; IoError if the process
// cannot be started.
double run_eval_hook(const std::string & command, const std::filesystem::path & candidate,
                     std::optional<double> timeout_seconds = {});

struct CandidateOutcome {
    std::size_t index = 0;  // enumeration order
    Assignment  assignment;
    bool        ok = false;
    double      score = 0.0;
    std::string failure;          // reason when !ok
    uint64_t    fingerprint = 0;  // merged checkpoint fingerprint when ok
};

struct SweepResult {
    std::vector<CandidateOutcome> candidates;  // enumeration order
    std::vector<std::size_t>      ranking;     // ok candidates, best first
    std::size_t                   best_index = 0;
    MergeRecipe                   best_recipe;  // template with the best assignment applied

    const CandidateOutcome & best() const { return candidates[best_index]; }
};

// Merges and scores every assignment in enumeration order. Failed
// candidates are recorded and excluded from the ranking; throws
// ValidationError when every candidate fails. Ties rank by smaller
// enumeration index. With keep_candidates = false only the best candidate's
// files survive. threads caps the merge engine's internal parallelism.
SweepResult grid_search(const SweepSpec & spec, int threads = 0);

std::string render_sweep_table(const SweepResult & result);
std::string render_sweep_doc(const SweepResult & result);

} // namespace ckmerge
