#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "ckmerge/conflict.hpp"
#include "ckmerge/digest.hpp"
#include "ckmerge/errors.hpp"
#include "ckmerge/sweep.hpp"
#include "ckmerge/synth.hpp"
#include "ckmerge/taskvec.hpp"
#include "ckmerge/tensorio.hpp"
#include "ckmerge/ties.hpp"

using namespace ckmerge;
using ordered_json = nlohmann::ordered_json;

namespace {

struct GlobalOpts {
    std::string format = "table";
    int         threads = 0;

    bool doc() const { return format == "doc"; }
};

std::string shape_string(const std::vector<uint64_t> & shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

std::string read_text_file(const std::string & path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

// --- inspect ---------------------------------------------------------------

int cmd_inspect(const GlobalOpts & g, const std::string & path) {
    CheckpointReader reader(path);
    uint64_t total_bytes = 0;
    for (const auto & [name, meta] : reader.tensors()) total_bytes += meta.nbytes();

    if (g.doc()) {
        ordered_json j;
        ordered_json arr = ordered_json::array();
        for (const auto & [name, meta] : reader.tensors()) {
            ordered_json t;
            t["name"] = name;
            t["dtype"] = dtype_name(meta.dtype);
            t["shape"] = meta.shape;
            t["bytes"] = meta.nbytes();
            arr.push_back(std::move(t));
        }
        j["tensors"] = std::move(arr);
        j["tensor_count"] = reader.tensors().size();
        j["total_bytes"] = total_bytes;
        j["metadata"] = reader.metadata();
        std::cout << j.dump(2) << "\n";
        return 0;
    }

    std::size_t name_w = 4;
    for (const auto & [name, meta] : reader.tensors()) name_w = std::max(name_w, name.size());
    std::cout << std::left << std::setw(int(name_w + 2)) << "name" << std::setw(6) << "dtype"
              << std::setw(18) << "shape" << std::right << std::setw(12) << "bytes" << "\n";
    for (const auto & [name, meta] : reader.tensors())
        std::cout << std::left << std::setw(int(name_w + 2)) << name << std::setw(6)
                  << dtype_name(meta.dtype) << std::setw(18) << shape_string(meta.shape)
                  << std::right << std::setw(12) << meta.nbytes() << "\n";
    std::cout << "total " << reader.tensors().size() << " tensors, " << total_bytes
              << " bytes\n";
    return 0;
}

// --- diff ------------------------------------------------------------------

struct DiffStats {
    double   l2 = 0.0;       // sqrt of the accumulated squared deltas
    double   sumsq = 0.0;
    float    max_abs = 0.0f;
    uint64_t nonzero = 0;
    uint64_t numel = 0;

    double nonzero_fraction() const { return numel ? double(nonzero) / double(numel) : 0.0; }
};

int cmd_diff(const GlobalOpts & g, const std::string & base_path,
             const std::string & tuned_path) {
    Checkpoint base = read_checkpoint(base_path);
    Checkpoint tuned = read_checkpoint(tuned_path);
    TaskVector tv = compute_task_vector(tuned, base);

    std::map<std::string, DiffStats> per_tensor;
    DiffStats global;
    for (const auto & [name, d] : tv.deltas) {
        DiffStats s;
        s.numel = d.values.size();
        for (float v : d.values) {
            s.sumsq += double(v) * double(v);
            s.max_abs = std::max(s.max_abs, std::fabs(v));
            if (v != 0.0f) ++s.nonzero;
        }
        s.l2 = std::sqrt(s.sumsq);
        global.sumsq += s.sumsq;
        global.max_abs = std::max(global.max_abs, s.max_abs);
        global.nonzero += s.nonzero;
        global.numel += s.numel;
        per_tensor[name] = s;
    }
    global.l2 = std::sqrt(global.sumsq);

    if (g.doc()) {
        auto stats_json = [](const DiffStats & s) {
            ordered_json j;
            j["l2"] = s.l2;
            j["max_abs"] = double(s.max_abs);
            j["nonzero_fraction"] = s.nonzero_fraction();
            return j;
        };
        ordered_json j;
        ordered_json per = ordered_json::object();
        for (const auto & [name, s] : per_tensor) per[name] = stats_json(s);
        j["per_tensor"] = std::move(per);
        j["global"] = stats_json(global);
        std::cout << j.dump(2) << "\n";
        return 0;
    }

    std::size_t name_w = 6;
    for (const auto & [name, s] : per_tensor) name_w = std::max(name_w, name.size());
    std::cout << std::left << std::setw(int(name_w + 2)) << "tensor" << std::right
              << std::setw(16) << "l2" << std::setw(16) << "max_abs" << std::setw(18)
              << "nonzero_fraction" << "\n";
    auto row = [&](const std::string & label, const DiffStats & s) {
        std::cout << std::left << std::setw(int(name_w + 2)) << label << std::right
                  << std::setw(16) << std::setprecision(8) << s.l2 << std::setw(16)
                  << double(s.max_abs) << std::setw(18) << s.nonzero_fraction() << "\n";
    };
    for (const auto & [name, s] : per_tensor) row(name, s);
    row("GLOBAL", global);
    return 0;
}

// --- merge -----------------------------------------------------------------

int cmd_merge(const GlobalOpts & g, const std::string & recipe_path,
              const std::string & out_path) {
    MergeRecipe recipe = MergeRecipe::from_json(read_text_file(recipe_path));
    MergeManifest manifest = run_recipe(recipe, out_path, g.threads);

    if (g.doc()) {
        std::cout << ordered_json::parse(manifest.to_json()).dump(2) << "\n";
        return 0;
    }
    std::cout << "wrote " << out_path << " (fingerprint " << to_hex(manifest.output_fingerprint)
              << ")\n";
    for (const ModelRetention & r : manifest.retention)
        std::cout << "  " << r.path << ": retained " << r.retained_total << "\n";
    if (manifest.conflict_summary) {
        const ConflictCounts & c = *manifest.conflict_summary;
        std::cout << "  conflicts " << c.conflicts << ", discard_proportion " << std::fixed
                  << std::setprecision(6) << c.discard_proportion() << "\n";
        std::cout.unsetf(std::ios::fixed);
    }
    if (manifest.recipe.algorithm == "ties_sv")
        std::cout << "  reserved " << manifest.reserved_total << " positions\n";
    return 0;
}

// --- analyze / series ------------------------------------------------------

struct AnalysisOpts {
    std::string base;
    std::string protected_path;
    double      k_protected = 0.2;
    double      k_other = 1.0;
    std::string granularity = "global";
};

Granularity parse_granularity(const std::string & name) {
    return granularity_from_name(name);
}

int cmd_analyze(const GlobalOpts & g, const AnalysisOpts & a, const std::string & other_path) {
    Checkpoint base = read_checkpoint(a.base);
    Checkpoint prot = read_checkpoint(a.protected_path);
    Checkpoint other = read_checkpoint(other_path);
    Granularity gran = parse_granularity(a.granularity);

    TrimmedDelta tp = trim(compute_task_vector(prot, base), a.k_protected, gran);
    TrimmedDelta to = trim(compute_task_vector(other, base), a.k_other, gran);
    ConflictReport report = conflict_report(tp, to);

    std::cout << (g.doc() ? render_report_doc(report) + "\n" : render_report_table(report));
    return 0;
}

int cmd_series(const GlobalOpts & g, const AnalysisOpts & a,
               const std::vector<std::string> & checkpoint_paths,
               const std::vector<std::string> & tags) {
    if (checkpoint_paths.empty()) throw ValidationError("series needs >= 1 checkpoint");
    Checkpoint base = read_checkpoint(a.base);
    Checkpoint prot = read_checkpoint(a.protected_path);
    std::vector<Checkpoint> checkpoints;
    checkpoints.reserve(checkpoint_paths.size());
    for (const std::string & p : checkpoint_paths) checkpoints.push_back(read_checkpoint(p));

    std::vector<SeriesEntry> series =
        series_analysis(base, prot, checkpoints, tags, a.k_protected, a.k_other,
                        parse_granularity(a.granularity));
    std::cout << (g.doc() ? render_series_doc(series) + "\n" : render_series_table(series));
    return 0;
}

// --- sweep / synth ---------------------------------------------------------

int cmd_sweep(const GlobalOpts & g, const std::string & spec_path) {
    SweepSpec spec = SweepSpec::from_json(read_text_file(spec_path));
    SweepResult result = grid_search(spec, g.threads);
    std::cout << (g.doc() ? render_sweep_doc(result) + "\n" : render_sweep_table(result));
    return 0;
}

std::filesystem::path series_path(const std::filesystem::path & out, uint64_t step) {
    std::filesystem::path p = out;
    std::string stem = p.stem().string();
    std::string ext = p.extension().string();
    return p.parent_path() / (stem + "_" + std::to_string(step) + ext);
}

int cmd_synth(const GlobalOpts &, const std::string & spec_path, const std::string & out) {
    SynthSpec spec = SynthSpec::from_json(read_text_file(spec_path));
    Checkpoint reference;
    const Checkpoint * ref = nullptr;
    if (spec.conflict_fraction) {
        if (spec.reference.empty())
            throw ValidationError("conflict injection needs a reference checkpoint");
        reference = read_checkpoint(spec.reference);
        ref = &reference;
    }

    if (spec.series_steps) {
        std::vector<Checkpoint> series =
            generate_ct_series(spec, *spec.series_steps, spec.series_growth, ref);
        for (uint64_t i = 0; i < series.size(); ++i) {
            std::filesystem::path p = series_path(out, i + 1);
            write_checkpoint(series[i], p);
            std::cout << p.string() << "\n";
        }
        return 0;
    }
    Checkpoint ck = generate_checkpoint(spec, ref);
    write_checkpoint(ck, out);
    std::cout << out << "\n";
    return 0;
}

} // namespace

int main(int argc, char ** argv) {
    CLI::App app{"checkpoint container and task-vector merge toolkit"};
    app.require_subcommand(1);
    app.fallthrough();

    GlobalOpts g;
    app.add_option("--format", g.format, "output format")
        ->check(CLI::IsMember({"table", "doc"}))
        ->capture_default_str();
    app.add_option("--threads", g.threads, "parallelism cap (0 = hardware)")
        ->check(CLI::NonNegativeNumber)
        ->capture_default_str();

    std::string inspect_path;
    CLI::App * inspect = app.add_subcommand("inspect", "list a checkpoint's tensors");
    inspect->add_option("checkpoint", inspect_path, "checkpoint path")->required();

    std::string diff_base, diff_tuned;
    CLI::App * diff = app.add_subcommand("diff", "task-vector statistics of tuned vs base");
    diff->add_option("base", diff_base, "base checkpoint")->required();
    diff->add_option("tuned", diff_tuned, "tuned checkpoint")->required();

    std::string merge_recipe, merge_out;
    CLI::App * merge = app.add_subcommand("merge", "merge checkpoints per a recipe file");
    merge->add_option("--recipe", merge_recipe, "recipe JSON path")->required();
    merge->add_option("--out", merge_out, "output checkpoint path")->required();

    AnalysisOpts an;
    std::string analyze_other;
    CLI::App * analyze = app.add_subcommand("analyze", "sign-conflict report for one pair");
    analyze->add_option("--protected", an.protected_path, "protected checkpoint")->required();
    analyze->add_option("--other", analyze_other, "other checkpoint")->required();
    analyze->add_option("--base", an.base, "shared base checkpoint")->required();
    analyze->add_option("--k-protected", an.k_protected, "protected trim density")
        ->capture_default_str();
    analyze->add_option("--k-other", an.k_other, "other trim density")->capture_default_str();
    analyze->add_option("--granularity", an.granularity, "trim granularity")
        ->check(CLI::IsMember({"global", "per_tensor"}))
        ->capture_default_str();

    AnalysisOpts se;
    std::vector<std::string> series_ckpts, series_tags;
    CLI::App * series = app.add_subcommand("series", "conflict series over checkpoints");
    series->add_option("--base", se.base, "shared base checkpoint")->required();
    series->add_option("--protected", se.protected_path, "protected checkpoint")->required();
    series->add_option("--checkpoints", series_ckpts, "checkpoint series in order")
        ->required()
        ->expected(-1);
    series->add_option("--tags", series_tags, "labels, one per checkpoint")->expected(-1);
    series->add_option("--k-protected", se.k_protected, "protected trim density")
        ->capture_default_str();
    series->add_option("--k-other", se.k_other, "other trim density")->capture_default_str();
    series->add_option("--granularity", se.granularity, "trim granularity")
        ->check(CLI::IsMember({"global", "per_tensor"}))
        ->capture_default_str();

    std::string sweep_spec;
    CLI::App * sweep = app.add_subcommand("sweep", "grid search over a recipe");
    sweep->add_option("--spec", sweep_spec, "sweep spec JSON path")->required();

    std::string synth_spec, synth_out;
    CLI::App * synth = app.add_subcommand("synth", "generate synthetic checkpoints");
    synth->add_option("--spec", synth_spec, "synth spec JSON path")->required();
    synth->add_option("--out", synth_out, "output checkpoint path")->required();

    try {
        app.parse(argc, argv);
        if (app.got_subcommand(inspect)) return cmd_inspect(g, inspect_path);
        if (app.got_subcommand(diff)) return cmd_diff(g, diff_base, diff_tuned);
        if (app.got_subcommand(merge)) return cmd_merge(g, merge_recipe, merge_out);
        if (app.got_subcommand(analyze)) return cmd_analyze(g, an, analyze_other);
        if (app.got_subcommand(series)) return cmd_series(g, se, series_ckpts, series_tags);
        if (app.got_subcommand(sweep)) return cmd_sweep(g, sweep_spec);
        if (app.got_subcommand(synth)) return cmd_synth(g, synth_spec, synth_out);
        return 0;
    } catch (const CLI::ParseError & e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 1;
    } catch (const ValidationError & e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const IoError & e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception & e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}
