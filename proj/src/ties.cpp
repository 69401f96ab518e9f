#include "ckmerge/ties.hpp"

#include <cmath>
#include <set>

#include <json.hpp>

#include "ckmerge/errors.hpp"
#include "kernels.hpp"

namespace ckmerge {

using ordered_json = nlohmann::ordered_json;
using json = nlohmann::json;

namespace {

void check_trimmed_structures(const std::vector<TrimmedDelta> & trimmed,
                              const std::string & what) {
    if (trimmed.empty()) throw ValidationError(what + ": no inputs");
    for (std::size_t m = 1; m < trimmed.size(); ++m) {
        if (trimmed[m].deltas.size() != trimmed[0].deltas.size())
            throw ValidationError(what + ": structure mismatch");
        for (const auto & [name, d] : trimmed[0].deltas) {
            auto it = trimmed[m].deltas.find(name);
            if (it == trimmed[m].deltas.end() || it->second.shape != d.shape)
                throw ValidationError(what + ": structure mismatch at tensor " + name);
        }
    }
}

} // namespace

Granularity granularity_from_name(const std::string & name) {
    if (name == "per_tensor") return Granularity::PerTensor;
    if (name == "global") return Granularity::Global;
    throw ValidationError("unknown trim granularity: " + name);
}

const char * granularity_name(Granularity g) {
    return g == Granularity::PerTensor ? "per_tensor" : "global";
}

TrimmedDelta trim(const TaskVector & tv, double k, Granularity granularity) {
    if (!(k >= 0.0 && k <= 1.0))
        throw ValidationError("trim density must lie in [0, 1]");
    TrimmedDelta out;
    out.density = k;
    out.base_fingerprint = tv.base_fingerprint;

    if (granularity == Granularity::PerTensor) {
        for (const auto & [name, d] : tv.deltas) {
            FloatTensor t = d;
            BitMask mask(t.values.size());
            uint64_t n_keep = trim_keep_count(k, t.values.size());
            SelectBoundary boundary = select_topk_abs(t.values, n_keep);
            uint64_t kept = apply_trim_boundary(t.values, boundary, boundary.budget, &mask);
            out.retained_per_tensor[name] = kept;
            out.retained_total += kept;
            out.kept[name] = std::move(mask);
            out.deltas[name] = std::move(t);
        }
        return out;
    }

    uint64_t total = 0;
    for (const auto & [name, d] : tv.deltas) total += d.values.size();
    uint64_t n_keep = trim_keep_count(k, total);

    SelectBoundary boundary;
    if (n_keep == 0) {
        boundary.select_none = true;
    } else if (n_keep >= total) {
        boundary.select_all = true;
    } else {
        SelHist coarse;
        for (const auto & [name, d] : tv.deltas)
            for (float v : d.values) coarse.count[coarse_of(abs_key(v))]++;
        auto [bucket, outside] = pick_bucket(coarse, n_keep, true);
        SelHist fine;
        for (const auto & [name, d] : tv.deltas)
            for (float v : d.values) {
                uint32_t key = abs_key(v);
                if (coarse_of(key) == bucket) fine.count[fine_of(key)]++;
            }
        boundary = resolve_boundary(n_keep, total, bucket, outside, fine, true);
    }

    // Threshold ties are kept in ascending (tensor name, flat index) order:
    // walk tensors in name order handing each its share of the tie budget.
    uint64_t remaining = boundary.budget;
    for (const auto & [name, d] : tv.deltas) {
        FloatTensor t = d;
        BitMask mask(t.values.size());
        uint64_t budget = 0;
        if (!boundary.select_all && !boundary.select_none && remaining > 0) {
            budget = std::min(remaining, count_abs_eq(t.values, boundary.key));
            remaining -= budget;
        }
        uint64_t kept = apply_trim_boundary(t.values, boundary, budget, &mask);
        out.retained_per_tensor[name] = kept;
        out.retained_total += kept;
        out.kept[name] = std::move(mask);
        out.deltas[name] = std::move(t);
    }
    return out;
}

SignTensor elect_signs(const std::vector<TrimmedDelta> & trimmed) {
    check_trimmed_structures(trimmed, "elect_signs");
    SignTensor out;
    for (const auto & [name, d0] : trimmed[0].deltas) {
        std::vector<const float *> taus;
        for (const TrimmedDelta & t : trimmed)
            taus.push_back(t.deltas.at(name).values.data());
        std::vector<int8_t> signs(d0.values.size());
        kern_elect(taus, signs.size(), signs.data());
        out.signs[name] = std::move(signs);
    }
    return out;
}

TaskVector disjoint_merge(const std::vector<TrimmedDelta> & trimmed, const SignTensor & signs,
                          bool normalize) {
    check_trimmed_structures(trimmed, "disjoint_merge");
    for (const auto & [name, d] : trimmed[0].deltas) {
        auto it = signs.signs.find(name);
        if (it == signs.signs.end() || it->second.size() != d.values.size())
            throw ValidationError("disjoint_merge: sign structure mismatch at tensor " + name);
    }

    TaskVector out;
    out.base_fingerprint = trimmed[0].base_fingerprint;
    for (const auto & [name, d0] : trimmed[0].deltas) {
        std::vector<const float *> taus;
        std::vector<const BitMask *> kept;
        for (const TrimmedDelta & t : trimmed) {
            taus.push_back(t.deltas.at(name).values.data());
            kept.push_back(&t.kept.at(name));
        }
        FloatTensor t;
        t.shape = d0.shape;
        t.values.resize(d0.values.size());
        kern_disjoint(taus, kept, signs.signs.at(name).data(), normalize, t.values.size(),
                      t.values.data());
        out.deltas[name] = std::move(t);
    }
    return out;
}

SlackReservation slack_reserve(const TrimmedDelta & protected_delta,
                               const TrimmedDelta & other_delta, double s) {
    if (!(s >= 0.0 && s <= 1.0))
        throw ValidationError("slack fraction must lie in [0, 1]");
    check_trimmed_structures({protected_delta, other_delta}, "slack_reserve");

    SlackReservation res;
    res.slack_fraction = s;

    SelHist coarse;
    uint64_t total_d = 0;
    for (const auto & [name, pd] : protected_delta.deltas) {
        const std::vector<float> & ov = other_delta.deltas.at(name).values;
        for (std::size_t i = 0; i < pd.values.size(); ++i) {
            float a = pd.values[i], b = ov[i];
            if (!discard_candidate(a, b)) continue;
            coarse.count[coarse_of(deficit_key(a, b))]++;
            ++total_d;
        }
    }

    uint64_t m = uint64_t(std::llround(s * double(protected_delta.retained_total)));
    if (m > total_d) m = total_d;
    if (m == 0) return res;

    SelectBoundary boundary;
    if (m >= total_d) {
        boundary.select_all = true;
    } else {
        auto [bucket, outside] = pick_bucket(coarse, m, false);
        SelHist fine;
        for (const auto & [name, pd] : protected_delta.deltas) {
            const std::vector<float> & ov = other_delta.deltas.at(name).values;
            for (std::size_t i = 0; i < pd.values.size(); ++i) {
                float a = pd.values[i], b = ov[i];
                if (!discard_candidate(a, b)) continue;
                uint32_t key = deficit_key(a, b);
                if (coarse_of(key) == bucket) fine.count[fine_of(key)]++;
            }
        }
        boundary = resolve_boundary(m, total_d, bucket, outside, fine, false);
    }

    // Smallest deficits first; ties resolved ascending (tensor name, index).
    uint64_t budget = boundary.budget;
    for (const auto & [name, pd] : protected_delta.deltas) {
        const std::vector<float> & ov = other_delta.deltas.at(name).values;
        std::vector<uint64_t> indices;
        for (std::size_t i = 0; i < pd.values.size(); ++i) {
            float a = pd.values[i], b = ov[i];
            if (!discard_candidate(a, b)) continue;
            bool take = boundary.select_all;
            if (!take) {
                uint32_t key = deficit_key(a, b);
                if (key < boundary.key) {
                    take = true;
                } else if (key == boundary.key && budget > 0) {
                    take = true;
                    --budget;
                }
            }
            if (take) indices.push_back(i);
        }
        if (!indices.empty()) {
            res.reserved_total += indices.size();
            res.reserved[name] = std::move(indices);
        }
    }
    return res;
}

void apply_reservation(SignTensor & signs, const TrimmedDelta & protected_delta,
                       const SlackReservation & reservation) {
    for (const auto & [name, indices] : reservation.reserved) {
        std::vector<int8_t> & gamma = signs.signs.at(name);
        const std::vector<float> & pv = protected_delta.deltas.at(name).values;
        for (uint64_t i : indices) gamma[i] = fsign(pv[i]);
    }
}

MergeRecipe MergeRecipe::from_json(const std::string & text) {
    json j = json::parse(text, nullptr, false);
    if (j.is_discarded()) throw ValidationError("recipe is not valid JSON");
    if (!j.is_object()) throw ValidationError("recipe must be a JSON object");

    static const std::set<std::string> allowed = {
        "algorithm", "base",  "models",    "densities", "scale",  "slack",
        "protected_model", "trim_granularity", "normalize", "drop_p", "seed", "output_dtype"};
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!allowed.count(it.key()))
            throw ValidationError("unknown recipe key: " + it.key());

    MergeRecipe r;
    if (!j.contains("algorithm") || !j["algorithm"].is_string())
        throw ValidationError("recipe requires an algorithm string");
    r.algorithm = j["algorithm"].get<std::string>();

    if (j.contains("base")) {
        if (!j["base"].is_string()) throw ValidationError("recipe base must be a string");
        r.base = j["base"].get<std::string>();
    }
    if (!j.contains("models") || !j["models"].is_array())
        throw ValidationError("recipe requires a models array");
    for (const json & m : j["models"]) {
        if (!m.is_string()) throw ValidationError("recipe models must be strings");
        r.models.push_back(m.get<std::string>());
    }
    if (j.contains("densities")) {
        if (!j["densities"].is_array())
            throw ValidationError("recipe densities must be an array of numbers");
        for (const json & d : j["densities"]) {
            if (!d.is_number()) throw ValidationError("recipe densities must be numbers");
            r.densities.push_back(d.get<double>());
        }
    }
    auto get_number = [&](const char * key, double & out) {
        if (!j.contains(key)) return;
        if (!j[key].is_number()) throw ValidationError(std::string(key) + " must be a number");
        out = j[key].get<double>();
    };
    get_number("scale", r.scale);
    get_number("slack", r.slack);
    get_number("drop_p", r.drop_p);
    if (j.contains("protected_model")) {
        if (!j["protected_model"].is_number_integer() || j["protected_model"].get<int64_t>() < 0)
            throw ValidationError("protected_model must be a non-negative integer");
        r.protected_model = int(j["protected_model"].get<int64_t>());
    }
    if (j.contains("trim_granularity")) {
        if (!j["trim_granularity"].is_string())
            throw ValidationError("trim_granularity must be a string");
        r.trim_granularity = granularity_from_name(j["trim_granularity"].get<std::string>());
    }
    if (j.contains("normalize")) {
        if (!j["normalize"].is_boolean()) throw ValidationError("normalize must be a boolean");
        r.normalize = j["normalize"].get<bool>();
    }
    if (j.contains("seed")) {
        if (!j["seed"].is_number_unsigned())
            throw ValidationError("seed must be a non-negative integer");
        r.seed = j["seed"].get<uint64_t>();
    }
    if (j.contains("output_dtype") && !j["output_dtype"].is_null()) {
        if (!j["output_dtype"].is_string())
            throw ValidationError("output_dtype must be a dtype string");
        const std::string name = j["output_dtype"].get<std::string>();
        auto dt = dtype_from_name(name);
        if (!dt) throw ValidationError("unknown output_dtype: " + name);
        r.output_dtype = *dt;
    }
    r.validate();
    return r;
}

std::string MergeRecipe::to_json() const {
    ordered_json j;
    j["algorithm"] = algorithm;
    j["base"] = base;
    j["models"] = models;
    j["densities"] = densities;
    j["scale"] = scale;
    j["slack"] = slack;
    j["protected_model"] = protected_model;
    j["trim_granularity"] = granularity_name(trim_granularity);
    j["normalize"] = normalize;
    j["drop_p"] = drop_p;
    j["seed"] = seed;
    if (output_dtype)
        j["output_dtype"] = dtype_name(*output_dtype);
    else
        j["output_dtype"] = nullptr;
    return j.dump();
}

void MergeRecipe::validate() const {
    static const std::set<std::string> algorithms = {"weighted_average", "task_arithmetic",
                                                     "ties", "ties_sv", "dare_ties"};
    if (!algorithms.count(algorithm))
        throw ValidationError("unknown algorithm: " + algorithm);
    if (models.empty()) throw ValidationError("recipe lists no models");
    if (algorithm == "weighted_average" && models.size() < 2)
        throw ValidationError("weighted_average needs at least two models");
    if (algorithm != "weighted_average" && base.empty())
        throw ValidationError("recipe requires a base checkpoint");
    if (densities.size() != models.size())
        throw ValidationError("densities length does not match models length");
    for (double d : densities) {
        if (!std::isfinite(d)) throw ValidationError("densities must be finite");
        if (is_trim_algorithm() && !(d >= 0.0 && d <= 1.0))
            throw ValidationError("trim densities must lie in [0, 1]");
    }
    if (!std::isfinite(scale)) throw ValidationError("scale must be finite");
    if (algorithm == "ties_sv") {
        if (models.size() != 2)
            throw ValidationError("ties_sv requires exactly two models");
        if (!(slack >= 0.0 && slack <= 1.0))
            throw ValidationError("slack must lie in [0, 1]");
        if (protected_model != 0 && protected_model != 1)
            throw ValidationError("protected_model must be 0 or 1");
    }
    if (algorithm == "dare_ties" && !(drop_p >= 0.0 && drop_p < 1.0))
        throw ValidationError("drop_p must lie in [0, 1)");
}

Checkpoint ties_merge(const MergeRecipe & recipe, const Checkpoint & base,
                      const std::vector<Checkpoint> & models) {
    recipe.validate();
    if (!recipe.is_trim_algorithm())
        throw ValidationError("ties_merge handles ties, ties_sv, and dare_ties only");
    if (models.size() != recipe.densities.size())
        throw ValidationError("densities length does not match models length");

    std::vector<TrimmedDelta> trimmed;
    trimmed.reserve(models.size());
    for (std::size_t m = 0; m < models.size(); ++m) {
        TaskVector tv = compute_task_vector(models[m], base);
        if (recipe.algorithm == "dare_ties")
            tv = dare_drop(tv, recipe.drop_p, recipe.seed);
        trimmed.push_back(trim(tv, recipe.densities[m], recipe.trim_granularity));
    }

    SignTensor signs = elect_signs(trimmed);
    if (recipe.algorithm == "ties_sv") {
        const TrimmedDelta & prot = trimmed[std::size_t(recipe.protected_model)];
        const TrimmedDelta & other = trimmed[std::size_t(1 - recipe.protected_model)];
        SlackReservation res = slack_reserve(prot, other, recipe.slack);
        apply_reservation(signs, prot, res);
    }

    TaskVector merged = disjoint_merge(trimmed, signs, recipe.normalize);
    return apply_task_vector(base, merged, recipe.scale, false, recipe.output_dtype);
}

} // namespace ckmerge
