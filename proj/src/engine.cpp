#include <atomic>
#include <cmath>
#include <fstream>
#include <functional>
#include <memory>
#include <mutex>
#include <thread>

#include <json.hpp>

#include "ckmerge/digest.hpp"
#include "ckmerge/errors.hpp"
#include "ckmerge/ties.hpp"
#include "kernels.hpp"

// The streaming merge engine. Tensors are processed independently: each
// worker reads one tensor's payloads from every input, runs the elementwise
// pipeline, and writes the result at its precomputed file offset, so peak
// memory is (model count + 1) F32 buffers of the largest tensor per worker
// and the output is byte-identical for any worker count.
//
// Global decisions (global-granularity trim thresholds, slack ranking) are
// two-phase: parallel passes accumulate exact histograms (commutative
// integer sums), a sequential step picks thresholds and hands out
// threshold-tie budgets in ascending (tensor name, flat index) order, and
// the final pass applies them.

namespace ckmerge {

using ordered_json = nlohmann::ordered_json;

namespace {

void parallel_for_names(const std::vector<std::string> & names, int threads,
                        const std::function<void(const std::string &)> & fn) {
    if (threads <= 0) threads = int(std::thread::hardware_concurrency());
    if (threads < 1) threads = 1;
    threads = std::min<int>(threads, int(names.size()));
    if (threads <= 1) {
        for (const std::string & name : names) fn(name);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::mutex err_mu;
    std::exception_ptr err;
    auto worker = [&] {
        for (;;) {
            std::size_t i = next.fetch_add(1);
            if (i >= names.size()) return;
            try {
                fn(names[i]);
            } catch (...) {
                std::lock_guard<std::mutex> lock(err_mu);
                if (!err) err = std::current_exception();
                return;
            }
        }
    };
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (std::thread & t : pool) t.join();
    if (err) std::rethrow_exception(err);
}

// Per-model global-trim state resolved across passes.
struct GlobalTrimState {
    SelectBoundary                  boundary;
    SelHist                         coarse;
    SelHist                         fine;
    uint32_t                        bucket = 0;
    uint64_t                        outside = 0;
    uint64_t                        n_keep = 0;
    std::map<std::string, uint64_t> budgets;  // threshold-tie budget per tensor
    std::map<std::string, uint64_t> eq;       // threshold-key count per tensor
};

struct SlackState {
    bool                            active = false;
    SelectBoundary                  boundary;
    SelHist                         coarse;
    SelHist                         fine;
    uint32_t                        bucket = 0;
    uint64_t                        outside = 0;
    uint64_t                        total_d = 0;
    uint64_t                        m = 0;
    std::map<std::string, uint64_t> budgets;
    std::map<std::string, uint64_t> eq;
};

class MergeEngine {
public:
    MergeEngine(const MergeRecipe & recipe, std::filesystem::path out_path, int threads)
        : recipe_(recipe), out_path_(std::move(out_path)), threads_(threads) {
        recipe_.validate();
        open_inputs();
        check_structures();
    }

    MergeManifest run() {
        if (recipe_.algorithm == "weighted_average")
            run_elementwise(false);
        else if (recipe_.algorithm == "task_arithmetic")
            run_elementwise(true);
        else
            run_trim_pipeline();

        MergeManifest manifest = make_manifest();
        std::ofstream out(out_path_.string() + ".manifest.json");
        if (!out) throw IoError("cannot write manifest next to " + out_path_.string());
        out << manifest.to_json() << "\n";
        return manifest;
    }

private:
    void open_inputs() {
        if (recipe_.uses_task_vectors())
            base_ = std::make_unique<CheckpointReader>(recipe_.base);
        for (const std::string & path : recipe_.models)
            models_.push_back(std::make_unique<CheckpointReader>(path));
        const CheckpointReader & ref = reference();
        for (const auto & [name, meta] : ref.tensors()) names_.push_back(name);
    }

    // All inputs must agree on tensor names and shapes before any output I/O.
    void check_structures() const {
        const CheckpointReader & ref = reference();
        auto check = [&](const CheckpointReader & r) {
            if (r.tensors().size() != ref.tensors().size())
                throw ValidationError("input checkpoints disagree on tensor names: " +
                                      r.path().string());
            for (const auto & [name, meta] : ref.tensors()) {
                auto it = r.tensors().find(name);
                if (it == r.tensors().end())
                    throw ValidationError("tensor " + name + " missing from " +
                                          r.path().string());
                if (it->second.shape != meta.shape)
                    throw ValidationError("shape mismatch at tensor " + name + " in " +
                                          r.path().string());
            }
        };
        for (const auto & m : models_) check(*m);
    }

    const CheckpointReader & reference() const { return base_ ? *base_ : *models_[0]; }

    Dtype out_dtype(const std::string & name) const {
        if (recipe_.output_dtype) return *recipe_.output_dtype;
        return reference().tensors().at(name).dtype;
    }

    std::unique_ptr<CheckpointWriter> make_writer() const {
        std::map<std::string, TensorMeta> metas;
        for (const auto & [name, meta] : reference().tensors()) {
            TensorMeta m;
            m.name = name;
            m.dtype = out_dtype(name);
            m.shape = meta.shape;
            metas[name] = m;
        }
        return std::make_unique<CheckpointWriter>(out_path_, metas);
    }

    // --- weighted_average / task_arithmetic: one streaming pass ------------

    void run_elementwise(bool with_base) {
        auto writer = make_writer();
        parallel_for_names(names_, threads_, [&](const std::string & name) {
            std::vector<float> basev;
            if (with_base) basev = base_->read_tensor_f32(name);
            std::vector<float> acc;
            for (std::size_t m = 0; m < models_.size(); ++m) {
                const float c = float(recipe_.densities[m]);
                std::vector<float> v = models_[m]->read_tensor_f32(name);
                if (m == 0) acc.assign(v.size(), 0.0f);
                if (with_base)
                    for (std::size_t i = 0; i < v.size(); ++i) v[i] = v[i] - basev[i];
                for (std::size_t i = 0; i < v.size(); ++i) acc[i] = acc[i] + c * v[i];
            }
            if (with_base) {
                apply_delta_inplace(basev, acc, recipe_.scale);
                acc = std::move(basev);
            }
            writer->write_tensor(name, from_f32(acc, out_dtype(name)));
        });
        writer->finish();
    }

    // --- trim pipeline: ties / ties_sv / dare_ties -------------------------

    // Task vectors for one tensor, in model order, dare applied.
    std::vector<std::vector<float>> load_deltas(const std::string & name,
                                                std::vector<float> * base_out) const {
        std::vector<float> basev = base_->read_tensor_f32(name);
        std::vector<std::vector<float>> taus;
        taus.reserve(models_.size());
        for (std::size_t m = 0; m < models_.size(); ++m) {
            std::vector<float> v = models_[m]->read_tensor_f32(name);
            for (std::size_t i = 0; i < v.size(); ++i) v[i] = v[i] - basev[i];
            if (recipe_.algorithm == "dare_ties")
                dare_drop_tensor(v, name, recipe_.drop_p, recipe_.seed);
            taus.push_back(std::move(v));
        }
        if (base_out) *base_out = std::move(basev);
        return taus;
    }

    // Trim every model's delta in place; returns keep masks and records
    // retained counts into `retention`.
    std::vector<BitMask> apply_trims(const std::string & name,
                                     std::vector<std::vector<float>> & taus,
                                     std::vector<ModelRetention> * retention,
                                     std::mutex * retention_mu) {
        std::vector<BitMask> masks;
        masks.reserve(taus.size());
        for (std::size_t m = 0; m < taus.size(); ++m) {
            BitMask mask(taus[m].size());
            uint64_t kept = 0;
            if (recipe_.trim_granularity == Granularity::PerTensor) {
                uint64_t n_keep = trim_keep_count(recipe_.densities[m], taus[m].size());
                SelectBoundary b = select_topk_abs(taus[m], n_keep);
                kept = apply_trim_boundary(taus[m], b, b.budget, &mask);
            } else {
                const GlobalTrimState & st = trim_state_[m];
                uint64_t budget = 0;
                if (auto it = st.budgets.find(name); it != st.budgets.end())
                    budget = it->second;
                kept = apply_trim_boundary(taus[m], st.boundary, budget, &mask);
            }
            if (retention) {
                std::lock_guard<std::mutex> lock(*retention_mu);
                (*retention)[m].retained_total += kept;
                (*retention)[m].per_tensor[name] = kept;
            }
            masks.push_back(std::move(mask));
        }
        return masks;
    }

    uint64_t total_numel() const {
        uint64_t t = 0;
        for (const auto & [name, meta] : reference().tensors()) t += meta.numel();
        return t;
    }

    // Exact retained total of one model, derivable without data passes.
    uint64_t retained_total_of(std::size_t m) const {
        if (recipe_.trim_granularity == Granularity::PerTensor) {
            uint64_t t = 0;
            for (const auto & [name, meta] : reference().tensors())
                t += trim_keep_count(recipe_.densities[m], meta.numel());
            return t;
        }
        return trim_keep_count(recipe_.densities[m], total_numel());
    }

    void resolve_global_trim() {
        const uint64_t total = total_numel();
        trim_state_.resize(models_.size());
        for (std::size_t m = 0; m < models_.size(); ++m)
            trim_state_[m].n_keep = trim_keep_count(recipe_.densities[m], total);

        bool any_mid = false;
        for (auto & st : trim_state_) {
            if (st.n_keep == 0)
                st.boundary.select_none = true;
            else if (st.n_keep >= total)
                st.boundary.select_all = true;
            else
                any_mid = true;
        }
        if (!any_mid) return;

        auto mid = [&](std::size_t m) {
            return !trim_state_[m].boundary.select_none && !trim_state_[m].boundary.select_all;
        };

        // Pass: coarse histograms of |delta| keys per model.
        std::mutex mu;
        parallel_for_names(names_, threads_, [&](const std::string & name) {
            auto taus = load_deltas(name, nullptr);
            std::vector<SelHist> local(models_.size());
            for (std::size_t m = 0; m < models_.size(); ++m) {
                if (!mid(m)) continue;
                for (float v : taus[m]) local[m].count[coarse_of(abs_key(v))]++;
            }
            std::lock_guard<std::mutex> lock(mu);
            for (std::size_t m = 0; m < models_.size(); ++m)
                if (mid(m)) trim_state_[m].coarse.add(local[m]);
        });
        for (std::size_t m = 0; m < models_.size(); ++m) {
            if (!mid(m)) continue;
            auto [bucket, outside] = pick_bucket(trim_state_[m].coarse, trim_state_[m].n_keep,
                                                 true);
            trim_state_[m].bucket = bucket;
            trim_state_[m].outside = outside;
        }

        // Pass: fine histograms inside each model's boundary bucket.
        parallel_for_names(names_, threads_, [&](const std::string & name) {
            auto taus = load_deltas(name, nullptr);
            std::vector<SelHist> local(models_.size());
            for (std::size_t m = 0; m < models_.size(); ++m) {
                if (!mid(m)) continue;
                for (float v : taus[m]) {
                    uint32_t key = abs_key(v);
                    if (coarse_of(key) == trim_state_[m].bucket)
                        local[m].count[fine_of(key)]++;
                }
            }
            std::lock_guard<std::mutex> lock(mu);
            for (std::size_t m = 0; m < models_.size(); ++m)
                if (mid(m)) trim_state_[m].fine.add(local[m]);
        });
        for (std::size_t m = 0; m < models_.size(); ++m) {
            if (!mid(m)) continue;
            trim_state_[m].boundary =
                resolve_boundary(trim_state_[m].n_keep, total, trim_state_[m].bucket,
                                 trim_state_[m].outside, trim_state_[m].fine, true);
        }

        // Pass: per-tensor threshold-key counts, then hand out tie budgets in
        // ascending tensor-name order.
        bool any_budget = false;
        for (std::size_t m = 0; m < models_.size(); ++m)
            any_budget = any_budget || (mid(m) && trim_state_[m].boundary.budget > 0);
        if (!any_budget) return;
        parallel_for_names(names_, threads_, [&](const std::string & name) {
            auto taus = load_deltas(name, nullptr);
            std::vector<uint64_t> eq(models_.size(), 0);
            for (std::size_t m = 0; m < models_.size(); ++m)
                if (mid(m) && trim_state_[m].boundary.budget > 0)
                    eq[m] = count_abs_eq(taus[m], trim_state_[m].boundary.key);
            std::lock_guard<std::mutex> lock(mu);
            for (std::size_t m = 0; m < models_.size(); ++m) trim_state_[m].eq[name] = eq[m];
        });
        for (std::size_t m = 0; m < models_.size(); ++m) {
            if (!(mid(m) && trim_state_[m].boundary.budget > 0)) continue;
            uint64_t remaining = trim_state_[m].boundary.budget;
            for (const std::string & name : names_) {
                uint64_t b = std::min(remaining, trim_state_[m].eq[name]);
                trim_state_[m].budgets[name] = b;
                remaining -= b;
            }
        }
    }

    void resolve_slack() {
        slack_.active = false;
        if (recipe_.algorithm != "ties_sv") return;
        const std::size_t pi = std::size_t(recipe_.protected_model);
        const std::size_t oi = 1 - pi;

        // Pass: coarse histogram of magnitude deficits over discard
        // candidates of the trimmed deltas.
        std::mutex mu;
        parallel_for_names(names_, threads_, [&](const std::string & name) {
            auto taus = load_deltas(name, nullptr);
            apply_trims(name, taus, nullptr, nullptr);
            SelHist local;
            uint64_t local_d = 0;
            const std::vector<float> & a = taus[pi];
            const std::vector<float> & b = taus[oi];
            for (std::size_t i = 0; i < a.size(); ++i) {
                if (!discard_candidate(a[i], b[i])) continue;
                local.count[coarse_of(deficit_key(a[i], b[i]))]++;
                ++local_d;
            }
            std::lock_guard<std::mutex> lock(mu);
            slack_.coarse.add(local);
            slack_.total_d += local_d;
        });

        uint64_t m = uint64_t(std::llround(recipe_.slack * double(retained_total_of(pi))));
        if (m > slack_.total_d) m = slack_.total_d;
        slack_.m = m;
        if (m == 0) return;
        slack_.active = true;
        if (m >= slack_.total_d) {
            slack_.boundary.select_all = true;
            return;
        }
        auto [bucket, outside] = pick_bucket(slack_.coarse, m, false);
        slack_.bucket = bucket;
        slack_.outside = outside;

        // Pass: fine histogram inside the boundary bucket.
        parallel_for_names(names_, threads_, [&](const std::string & name) {
            auto taus = load_deltas(name, nullptr);
            apply_trims(name, taus, nullptr, nullptr);
            SelHist local;
            const std::vector<float> & a = taus[pi];
            const std::vector<float> & b = taus[oi];
            for (std::size_t i = 0; i < a.size(); ++i) {
                if (!discard_candidate(a[i], b[i])) continue;
                uint32_t key = deficit_key(a[i], b[i]);
                if (coarse_of(key) == slack_.bucket) local.count[fine_of(key)]++;
            }
            std::lock_guard<std::mutex> lock(mu);
            slack_.fine.add(local);
        });
        slack_.boundary =
            resolve_boundary(m, slack_.total_d, slack_.bucket, slack_.outside, slack_.fine,
                             false);

        // Pass: per-tensor boundary-key counts, then tie budgets by name.
        if (slack_.boundary.budget == 0) return;
        parallel_for_names(names_, threads_, [&](const std::string & name) {
            auto taus = load_deltas(name, nullptr);
            apply_trims(name, taus, nullptr, nullptr);
            uint64_t eq = 0;
            const std::vector<float> & a = taus[pi];
            const std::vector<float> & b = taus[oi];
            for (std::size_t i = 0; i < a.size(); ++i)
                if (discard_candidate(a[i], b[i]) &&
                    deficit_key(a[i], b[i]) == slack_.boundary.key)
                    ++eq;
            std::lock_guard<std::mutex> lock(mu);
            slack_.eq[name] = eq;
        });
        uint64_t remaining = slack_.boundary.budget;
        for (const std::string & name : names_) {
            uint64_t b = std::min(remaining, slack_.eq[name]);
            slack_.budgets[name] = b;
            remaining -= b;
        }
    }

    void run_trim_pipeline() {
        if (recipe_.trim_granularity == Granularity::Global) resolve_global_trim();
        resolve_slack();

        retention_.resize(models_.size());
        for (std::size_t m = 0; m < models_.size(); ++m)
            retention_[m].path = recipe_.models[m];

        const bool two_model_summary = models_.size() == 2;
        const std::size_t pi = std::size_t(recipe_.protected_model) < models_.size()
                                   ? std::size_t(recipe_.protected_model)
                                   : 0;

        auto writer = make_writer();
        std::mutex mu;
        parallel_for_names(names_, threads_, [&](const std::string & name) {
            std::vector<float> basev;
            auto taus = load_deltas(name, &basev);
            auto masks = apply_trims(name, taus, &retention_, &mu);

            std::vector<const float *> tau_ptrs;
            std::vector<const BitMask *> mask_ptrs;
            for (std::size_t m = 0; m < taus.size(); ++m) {
                tau_ptrs.push_back(taus[m].data());
                mask_ptrs.push_back(&masks[m]);
            }
            const std::size_t n = taus[0].size();
            std::vector<int8_t> gamma(n);
            kern_elect(tau_ptrs, n, gamma.data());

            uint64_t reserved_here = 0;
            if (slack_.active) {
                const std::vector<float> & a = taus[pi];
                const std::vector<float> & b = taus[1 - pi];
                uint64_t budget = 0;
                if (auto it = slack_.budgets.find(name); it != slack_.budgets.end())
                    budget = it->second;
                for (std::size_t i = 0; i < n; ++i) {
                    if (!discard_candidate(a[i], b[i])) continue;
                    bool take = slack_.boundary.select_all;
                    if (!take) {
                        uint32_t key = deficit_key(a[i], b[i]);
                        if (key < slack_.boundary.key) {
                            take = true;
                        } else if (key == slack_.boundary.key && budget > 0) {
                            take = true;
                            --budget;
                        }
                    }
                    if (take) {
                        gamma[i] = fsign(a[i]);
                        ++reserved_here;
                    }
                }
            }

            // Count before merging: the merge overwrites taus[0] below.
            ConflictCounts local;
            if (two_model_summary)
                local = count_conflicts(taus[pi], taus[1 - pi], masks[pi], masks[1 - pi]);

            // The merged delta overwrites the first model's buffer; the
            // kernel writes out[i] only after reading every model at i.
            std::vector<float> & merged = taus[0];
            kern_disjoint(tau_ptrs, mask_ptrs, gamma.data(), recipe_.normalize, n,
                          merged.data());

            apply_delta_inplace(basev, merged, recipe_.scale);
            writer->write_tensor(name, from_f32(basev, out_dtype(name)));

            std::lock_guard<std::mutex> lock(mu);
            reserved_total_ += reserved_here;
            if (two_model_summary) conflict_totals_.add(local);
        });
        writer->finish();
        has_conflict_summary_ = two_model_summary;
    }

    MergeManifest make_manifest() const {
        MergeManifest man;
        man.recipe = recipe_;
        if (base_) man.base_fingerprint = base_->fingerprint();
        for (const auto & m : models_) man.model_fingerprints.push_back(m->fingerprint());
        CheckpointReader out(out_path_);
        man.output_fingerprint = out.fingerprint();
        man.retention = retention_;
        if (has_conflict_summary_) man.conflict_summary = conflict_totals_;
        man.reserved_total = reserved_total_;
        return man;
    }

    MergeRecipe           recipe_;
    std::filesystem::path out_path_;
    int                   threads_;

    std::unique_ptr<CheckpointReader>              base_;
    std::vector<std::unique_ptr<CheckpointReader>> models_;
    std::vector<std::string>                       names_;

    std::vector<GlobalTrimState> trim_state_;
    SlackState                   slack_;
    std::vector<ModelRetention>  retention_;
    ConflictCounts               conflict_totals_;
    bool                         has_conflict_summary_ = false;
    uint64_t                     reserved_total_ = 0;
};

} // namespace

std::string MergeManifest::to_json() const {
    ordered_json j;
    j["recipe"] = ordered_json::parse(recipe.to_json());
    j["base_fingerprint"] = recipe.base.empty() ? "" : to_hex(base_fingerprint);
    ordered_json fps = ordered_json::array();
    for (uint64_t fp : model_fingerprints) fps.push_back(to_hex(fp));
    j["model_fingerprints"] = std::move(fps);
    j["output_fingerprint"] = to_hex(output_fingerprint);
    ordered_json ret = ordered_json::array();
    for (const ModelRetention & r : retention) {
        ordered_json e;
        e["path"] = r.path;
        e["retained_total"] = r.retained_total;
        e["retained_per_tensor"] = r.per_tensor;
        ret.push_back(std::move(e));
    }
    j["retention"] = std::move(ret);
    if (conflict_summary) {
        const ConflictCounts & c = *conflict_summary;
        ordered_json e;
        e["retained_protected"] = c.retained_protected;
        e["retained_other"] = c.retained_other;
        e["overlap"] = c.overlap;
        e["conflicts"] = c.conflicts;
        e["discarded_protected"] = c.discarded_protected;
        e["discarded_other"] = c.discarded_other;
        e["zero_sum_ties"] = c.zero_sum_ties;
        e["discard_proportion"] = c.discard_proportion();
        j["conflict_summary"] = std::move(e);
    } else {
        j["conflict_summary"] = nullptr;
    }
    j["reserved_total"] = reserved_total;
    return j.dump();
}

MergeManifest run_recipe(const MergeRecipe & recipe, const std::filesystem::path & out_path,
                         int threads) {
    MergeEngine engine(recipe, out_path, threads);
    return engine.run();
}

} // namespace ckmerge
