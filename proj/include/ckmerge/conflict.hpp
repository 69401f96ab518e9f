#pragma once

#include <map>
#include <string>
#include <vector>

#include "ckmerge/tensorio.hpp"
#include "ckmerge/ties.hpp"
#include "ckmerge/trimsel.hpp"

namespace ckmerge {

// Sign-conflict accounting between two trimmed deltas: a totals block plus
// the same counters per tensor. `conflicts` partitions exactly into
// discarded_protected + discarded_other + zero_sum_ties.
struct ConflictReport {
    ConflictCounts                        total;
    std::map<std::string, ConflictCounts> per_tensor;
};

// Counts retained/overlap/conflict positions of the pair. Positions the trim
// kept at value zero count as retained; a conflict needs both values nonzero
// with opposite signs. Throws ValidationError on structure mismatch.
ConflictReport conflict_report(const TrimmedDelta & protected_delta,
                               const TrimmedDelta & other_delta);

// One labeled point of a checkpoint-series analysis.
struct SeriesEntry {
    std::string    tag;
    ConflictReport report;
};

// For each checkpoint: compute both task vectors against the shared base,
// trim with the frozen densities, and report conflicts with the protected
// model. Entries keep the input order. Tags label entries one-to-one; an
// empty tag list defaults to decimal indices.
std::vector<SeriesEntry> series_analysis(const Checkpoint & base,
                                         const Checkpoint & protected_model,
                                         const std::vector<Checkpoint> & checkpoints,
                                         const std::vector<std::string> & tags = {},
                                         double k_protected = 0.2, double k_other = 1.0,
                                         Granularity granularity = Granularity::Global);

// Rendering. The document form is JSON with one record per entry and field
// names matching the counter names; the table form is fixed-width text with
// a header row.
std::string render_report_table(const ConflictReport & report);
std::string render_report_doc(const ConflictReport & report);
std::string render_series_table(const std::vector<SeriesEntry> & series);
std::string render_series_doc(const std::vector<SeriesEntry> & series);

} // namespace ckmerge
