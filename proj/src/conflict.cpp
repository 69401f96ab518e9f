#include <iomanip>
#include <sstream>

#include <json.hpp>

#include "ckmerge/conflict.hpp"
#include "ckmerge/errors.hpp"
#include "ckmerge/taskvec.hpp"

namespace ckmerge {

using ordered_json = nlohmann::ordered_json;

namespace {

void check_pair(const TrimmedDelta & a, const TrimmedDelta & b) {
    if (a.deltas.size() != b.deltas.size())
        throw ValidationError("conflict report inputs disagree on tensor names");
    for (const auto & [name, d] : a.deltas) {
        auto it = b.deltas.find(name);
        if (it == b.deltas.end())
            throw ValidationError("conflict report inputs disagree on tensor names: " + name);
        if (it->second.shape != d.shape)
            throw ValidationError("conflict report shape mismatch at tensor " + name);
    }
}

ordered_json counts_json(const ConflictCounts & c) {
    ordered_json j;
    j["retained_protected"] = c.retained_protected;
    j["retained_other"] = c.retained_other;
    j["overlap"] = c.overlap;
    j["conflicts"] = c.conflicts;
    j["discarded_protected"] = c.discarded_protected;
    j["discarded_other"] = c.discarded_other;
    j["zero_sum_ties"] = c.zero_sum_ties;
    j["discard_proportion"] = c.discard_proportion();
    return j;
}

constexpr const char * kColumns[] = {
    "retained_protected", "retained_other", "overlap",       "conflicts",
    "discarded_protected", "discarded_other", "zero_sum_ties", "discard_proportion",
};

void counts_row(std::ostringstream & out, const ConflictCounts & c) {
    out << std::setw(19) << c.retained_protected << std::setw(16) << c.retained_other
        << std::setw(9) << c.overlap << std::setw(11) << c.conflicts << std::setw(20)
        << c.discarded_protected << std::setw(17) << c.discarded_other << std::setw(15)
        << c.zero_sum_ties << std::setw(19) << std::fixed << std::setprecision(6)
        << c.discard_proportion();
    out.unsetf(std::ios::fixed);
}

void header_row(std::ostringstream & out) {
    out << std::setw(19) << kColumns[0] << std::setw(16) << kColumns[1] << std::setw(9)
        << kColumns[2] << std::setw(11) << kColumns[3] << std::setw(20) << kColumns[4]
        << std::setw(17) << kColumns[5] << std::setw(15) << kColumns[6] << std::setw(19)
        << kColumns[7];
}

} // namespace

ConflictReport conflict_report(const TrimmedDelta & protected_delta,
                               const TrimmedDelta & other_delta) {
    check_pair(protected_delta, other_delta);
    ConflictReport report;
    for (const auto & [name, d] : protected_delta.deltas) {
        ConflictCounts c =
            count_conflicts(d.values, other_delta.deltas.at(name).values,
                            protected_delta.kept.at(name), other_delta.kept.at(name));
        report.total.add(c);
        report.per_tensor[name] = c;
    }
    return report;
}

std::vector<SeriesEntry> series_analysis(const Checkpoint & base,
                                         const Checkpoint & protected_model,
                                         const std::vector<Checkpoint> & checkpoints,
                                         const std::vector<std::string> & tags,
                                         double k_protected, double k_other,
                                         Granularity granularity) {
    if (checkpoints.empty()) throw ValidationError("series analysis needs >= 1 checkpoint");
    if (!tags.empty() && tags.size() != checkpoints.size())
        throw ValidationError("tag count does not match checkpoint count");

    TrimmedDelta prot =
        trim(compute_task_vector(protected_model, base), k_protected, granularity);

    std::vector<SeriesEntry> series;
    series.reserve(checkpoints.size());
    for (std::size_t i = 0; i < checkpoints.size(); ++i) {
        TrimmedDelta other =
            trim(compute_task_vector(checkpoints[i], base), k_other, granularity);
        SeriesEntry entry;
        entry.tag = tags.empty() ? std::to_string(i) : tags[i];
        entry.report = conflict_report(prot, other);
        series.push_back(std::move(entry));
    }
    return series;
}

std::string render_report_table(const ConflictReport & report) {
    std::ostringstream out;
    std::size_t name_w = 6;  // "tensor"
    for (const auto & [name, c] : report.per_tensor) name_w = std::max(name_w, name.size());
    out << std::left << std::setw(int(name_w + 2)) << "tensor" << std::right;
    header_row(out);
    out << "\n";
    for (const auto & [name, c] : report.per_tensor) {
        out << std::left << std::setw(int(name_w + 2)) << name << std::right;
        counts_row(out, c);
        out << "\n";
    }
    out << std::left << std::setw(int(name_w + 2)) << "TOTAL" << std::right;
    counts_row(out, report.total);
    out << "\n";
    return out.str();
}

std::string render_report_doc(const ConflictReport & report) {
    ordered_json j;
    j["total"] = counts_json(report.total);
    ordered_json per = ordered_json::object();
    for (const auto & [name, c] : report.per_tensor) per[name] = counts_json(c);
    j["per_tensor"] = std::move(per);
    return j.dump(2);
}

std::string render_series_table(const std::vector<SeriesEntry> & series) {
    std::ostringstream out;
    std::size_t tag_w = 3;  // "tag"
    for (const SeriesEntry & e : series) tag_w = std::max(tag_w, e.tag.size());
    out << std::left << std::setw(int(tag_w + 2)) << "tag" << std::right;
    header_row(out);
    out << "\n";
    for (const SeriesEntry & e : series) {
        out << std::left << std::setw(int(tag_w + 2)) << e.tag << std::right;
        counts_row(out, e.report.total);
        out << "\n";
    }
    return out.str();
}

std::string render_series_doc(const std::vector<SeriesEntry> & series) {
    ordered_json arr = ordered_json::array();
    for (const SeriesEntry & e : series) {
        ordered_json rec;
        rec["tag"] = e.tag;
        ordered_json body = counts_json(e.report.total);
        for (auto & [k, v] : body.items()) rec[k] = v;
        arr.push_back(std::move(rec));
    }
    return arr.dump(2);
}

} // namespace ckmerge
