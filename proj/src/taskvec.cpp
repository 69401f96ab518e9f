#include "ckmerge/taskvec.hpp"

#include <cmath>

#include "ckmerge/errors.hpp"
#include "ckmerge/rng.hpp"

namespace ckmerge {

AveragingWeights AveragingWeights::two_model(double w) {
    if (!(w >= 0.0 && w <= 1.0))
        throw ValidationError("two-model averaging weight must lie in [0, 1]");
    return AveragingWeights{{w, 1.0 - w}};
}

void check_same_structure(const Checkpoint & a, const Checkpoint & b,
                          const std::string & what) {
    for (const auto & [name, t] : a.tensors)
        if (!b.tensors.count(name))
            throw ValidationError(what + ": tensor " + name + " missing from one input");
    for (const auto & [name, t] : b.tensors) {
        auto it = a.tensors.find(name);
        if (it == a.tensors.end())
            throw ValidationError(what + ": tensor " + name + " missing from one input");
        if (it->second.shape != t.shape)
            throw ValidationError(what + ": shape mismatch at tensor " + name);
    }
}

TaskVector compute_task_vector(const Checkpoint & tuned, const Checkpoint & base) {
    check_same_structure(tuned, base, "compute_task_vector");
    TaskVector tv;
    tv.base_fingerprint = base.fingerprint();
    tv.source_fingerprint = tuned.fingerprint();
    for (const auto & [name, bt] : base.tensors) {
        const Tensor & tt = tuned.tensors.at(name);
        FloatTensor d;
        d.shape = bt.shape;
        d.values = tt.values_f32();
        std::vector<float> bv = bt.values_f32();
        for (std::size_t i = 0; i < d.values.size(); ++i)
            d.values[i] = d.values[i] - bv[i];
        tv.deltas[name] = std::move(d);
    }
    return tv;
}

namespace {

void check_delta_structure(const Checkpoint & base, const TaskVector & tv) {
    for (const auto & [name, t] : base.tensors) {
        auto it = tv.deltas.find(name);
        if (it == tv.deltas.end())
            throw ValidationError("task vector missing tensor " + name);
        if (it->second.shape != t.shape)
            throw ValidationError("task vector shape mismatch at tensor " + name);
    }
    for (const auto & [name, d] : tv.deltas)
        if (!base.tensors.count(name))
            throw ValidationError("task vector has extra tensor " + name);
}

void check_base_fingerprint(const Checkpoint & base, const TaskVector & tv,
                            bool allow_base_mismatch) {
    if (allow_base_mismatch) return;
    if (tv.base_fingerprint != base.fingerprint())
        throw ValidationError(
            "task vector was computed against a different base checkpoint "
            "(pass allow_base_mismatch to override)");
}

} // namespace

void apply_delta_inplace(std::vector<float> & values, const std::vector<float> & delta,
                         double scale) {
    const float s = float(scale);
    if (s == 0.0f) return;
    for (std::size_t i = 0; i < values.size(); ++i)
        values[i] = values[i] + s * delta[i];
}

Checkpoint apply_task_vector(const Checkpoint & base, const TaskVector & tv, double scale,
                             bool allow_base_mismatch, std::optional<Dtype> output_dtype) {
    check_delta_structure(base, tv);
    check_base_fingerprint(base, tv, allow_base_mismatch);
    Checkpoint out;
    out.metadata = base.metadata;
    for (const auto & [name, bt] : base.tensors) {
        const FloatTensor & d = tv.deltas.at(name);
        std::vector<float> v = bt.values_f32();
        apply_delta_inplace(v, d.values, scale);
        Tensor t;
        t.dtype = output_dtype.value_or(bt.dtype);
        t.shape = bt.shape;
        t.data = from_f32(v, t.dtype);
        out.tensors[name] = std::move(t);
    }
    return out;
}

Checkpoint weighted_average(const std::vector<Checkpoint> & models,
                            const AveragingWeights & weights) {
    if (models.size() < 2)
        throw ValidationError("weighted_average needs at least two models");
    if (weights.weights.size() != models.size())
        throw ValidationError("weight count does not match model count");
    for (double w : weights.weights)
        if (!std::isfinite(w)) throw ValidationError("averaging weights must be finite");
    for (std::size_t i = 1; i < models.size(); ++i)
        check_same_structure(models[0], models[i], "weighted_average");

    Checkpoint out;
    for (const auto & [name, first] : models[0].tensors) {
        std::vector<float> acc(first.numel(), 0.0f);
        for (std::size_t m = 0; m < models.size(); ++m) {
            const float w = float(weights.weights[m]);
            std::vector<float> v = models[m].tensors.at(name).values_f32();
            for (std::size_t i = 0; i < acc.size(); ++i)
                acc[i] = acc[i] + w * v[i];
        }
        Tensor t;
        t.dtype = first.dtype;
        t.shape = first.shape;
        t.data = from_f32(acc, first.dtype);
        out.tensors[name] = std::move(t);
    }
    return out;
}

TaskVector combine_task_vectors(const std::vector<TaskVector> & tvs,
                                const std::vector<double> & coeffs) {
    if (tvs.empty()) throw ValidationError("no task vectors to combine");
    if (coeffs.size() != tvs.size())
        throw ValidationError("coefficient count does not match task vector count");
    for (std::size_t m = 1; m < tvs.size(); ++m) {
        for (const auto & [name, d] : tvs[0].deltas) {
            auto it = tvs[m].deltas.find(name);
            if (it == tvs[m].deltas.end() || it->second.shape != d.shape)
                throw ValidationError("task vector structure mismatch at tensor " + name);
        }
        if (tvs[m].deltas.size() != tvs[0].deltas.size())
            throw ValidationError("task vector structure mismatch");
    }

    TaskVector out;
    out.base_fingerprint = tvs[0].base_fingerprint;
    for (const auto & [name, d0] : tvs[0].deltas) {
        FloatTensor acc;
        acc.shape = d0.shape;
        acc.values.assign(d0.values.size(), 0.0f);
        for (std::size_t m = 0; m < tvs.size(); ++m) {
            const float c = float(coeffs[m]);
            const std::vector<float> & v = tvs[m].deltas.at(name).values;
            for (std::size_t i = 0; i < acc.values.size(); ++i)
                acc.values[i] = acc.values[i] + c * v[i];
        }
        out.deltas[name] = std::move(acc);
    }
    return out;
}

Checkpoint task_arithmetic_merge(const Checkpoint & base, const std::vector<TaskVector> & tvs,
                                 const std::vector<double> & coeffs,
                                 bool allow_base_mismatch) {
    if (!allow_base_mismatch) {
        uint64_t fp = base.fingerprint();
        for (const TaskVector & tv : tvs)
            if (tv.base_fingerprint != fp)
                throw ValidationError(
                    "task vector was computed against a different base checkpoint "
                    "(pass allow_base_mismatch to override)");
    }
    TaskVector combined = combine_task_vectors(tvs, coeffs);
    combined.base_fingerprint = base.fingerprint();
    return apply_task_vector(base, combined, 1.0, allow_base_mismatch);
}

void dare_drop_tensor(std::vector<float> & values, const std::string & name, double p,
                      uint64_t seed) {
    if (!(p >= 0.0 && p < 1.0))
        throw ValidationError("drop probability must lie in [0, 1)");
    if (p == 0.0) return;
    const float rescale = float(1.0 / (1.0 - p));
    KeyedStream stream = KeyedStream::for_tensor(seed, name);
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (u01(stream.at(i)) < p)
            values[i] = 0.0f;
        else
            values[i] = values[i] * rescale;
    }
}

TaskVector dare_drop(const TaskVector & tv, double p, uint64_t seed) {
    if (!(p >= 0.0 && p < 1.0))
        throw ValidationError("drop probability must lie in [0, 1)");
    TaskVector out = tv;
    for (auto & [name, d] : out.deltas)
        dare_drop_tensor(d.values, name, p, seed);
    return out;
}

} // namespace ckmerge
