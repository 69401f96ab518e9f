#include <algorithm>
#include <cmath>
#include <set>

#include <json.hpp>

#include "ckmerge/errors.hpp"
#include "ckmerge/rng.hpp"
#include "ckmerge/synth.hpp"

namespace ckmerge {

namespace {

// Salts separating the flip-selection and series-delta streams from the
// value stream of the same seed.
constexpr uint64_t kFlipSalt = 0x636f6e666c696374ULL;
constexpr uint64_t kSeriesSalt = 0x73657269657334ULL;

uint64_t spec_numel(const SynthTensorSpec & t) {
    uint64_t n = 1;
    for (uint64_t d : t.shape) n *= d;
    return n;
}

float draw_value(const SynthSpec & spec, const KeyedStream & stream, uint64_t i) {
    if (spec.constant) return float(spec.constant_value);
    return uniform_pm1(stream.at(i));
}

void check_json_keys(const nlohmann::json & j, const std::set<std::string> & allowed,
                     const std::string & where) {
    for (const auto & [key, value] : j.items())
        if (!allowed.count(key))
            throw ValidationError("unknown field '" + key + "' in " + where);
}

} // namespace

SynthSpec SynthSpec::from_json(const std::string & text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception & e) {
        throw ValidationError(std::string("synth spec is not valid JSON: ") + e.what());
    }
    if (!j.is_object()) throw ValidationError("synth spec must be a JSON object");
    check_json_keys(j, {"seed", "tensors", "distribution", "value", "conflict", "series"},
                    "synth spec");

    SynthSpec spec;
    if (!j.contains("seed") || !j["seed"].is_number_unsigned())
        throw ValidationError("synth spec needs an unsigned 'seed'");
    spec.seed = j["seed"].get<uint64_t>();

    if (!j.contains("tensors") || !j["tensors"].is_array())
        throw ValidationError("synth spec needs a 'tensors' array");
    for (const auto & t : j["tensors"]) {
        if (!t.is_object()) throw ValidationError("tensor spec must be an object");
        check_json_keys(t, {"name", "shape", "dtype"}, "tensor spec");
        SynthTensorSpec ts;
        if (!t.contains("name") || !t["name"].is_string())
            throw ValidationError("tensor spec needs a string 'name'");
        ts.name = t["name"].get<std::string>();
        if (!t.contains("shape") || !t["shape"].is_array())
            throw ValidationError("tensor spec needs a 'shape' array");
        for (const auto & d : t["shape"]) {
            if (!d.is_number_unsigned())
                throw ValidationError("shape dims must be non-negative integers");
            ts.shape.push_back(d.get<uint64_t>());
        }
        if (t.contains("dtype")) {
            if (!t["dtype"].is_string()) throw ValidationError("dtype must be a string");
            auto d = dtype_from_name(t["dtype"].get<std::string>());
            if (!d) throw ValidationError("unknown dtype: " + t["dtype"].get<std::string>());
            ts.dtype = *d;
        }
        spec.tensors.push_back(std::move(ts));
    }

    if (j.contains("distribution")) {
        if (!j["distribution"].is_string())
            throw ValidationError("distribution must be 'uniform' or 'constant'");
        std::string d = j["distribution"].get<std::string>();
        if (d == "constant")
            spec.constant = true;
        else if (d != "uniform")
            throw ValidationError("distribution must be 'uniform' or 'constant'");
    }
    if (j.contains("value")) {
        if (!spec.constant)
            throw ValidationError("'value' is only meaningful with the constant distribution");
        if (!j["value"].is_number()) throw ValidationError("'value' must be a number");
        spec.constant_value = j["value"].get<double>();
    }

    if (j.contains("conflict")) {
        const auto & c = j["conflict"];
        if (!c.is_object()) throw ValidationError("'conflict' must be an object");
        check_json_keys(c, {"fraction", "reference"}, "conflict block");
        if (!c.contains("fraction") || !c["fraction"].is_number())
            throw ValidationError("conflict block needs a numeric 'fraction'");
        spec.conflict_fraction = c["fraction"].get<double>();
        if (!c.contains("reference") || !c["reference"].is_string())
            throw ValidationError("conflict block needs a 'reference' checkpoint path");
        spec.reference = c["reference"].get<std::string>();
    }

    if (j.contains("series")) {
        const auto & s = j["series"];
        if (!s.is_object()) throw ValidationError("'series' must be an object");
        check_json_keys(s, {"steps", "growth"}, "series block");
        if (!s.contains("steps") || !s["steps"].is_number_unsigned())
            throw ValidationError("series block needs an unsigned 'steps'");
        spec.series_steps = s["steps"].get<uint64_t>();
        if (s.contains("growth")) {
            if (!s["growth"].is_number()) throw ValidationError("'growth' must be a number");
            spec.series_growth = s["growth"].get<double>();
        }
    }

    spec.validate();
    return spec;
}

void SynthSpec::validate() const {
    if (tensors.empty()) throw ValidationError("synth spec needs at least one tensor");
    std::set<std::string> seen;
    for (const SynthTensorSpec & t : tensors) {
        if (t.name.empty()) throw ValidationError("tensor names must be non-empty");
        if (t.name == "__metadata__")
            throw ValidationError("'__metadata__' is reserved and cannot name a tensor");
        if (!seen.insert(t.name).second)
            throw ValidationError("duplicate tensor name: " + t.name);
    }
    if (conflict_fraction) {
        if (!(*conflict_fraction >= 0.0 && *conflict_fraction <= 1.0))
            throw ValidationError("conflict fraction must lie in [0, 1]");
    }
    if (!constant && constant_value != 0.0)
        throw ValidationError("constant value set without the constant distribution");
    if (series_steps && *series_steps < 1)
        throw ValidationError("series needs at least one step");
    if (series_steps && !(series_growth >= 0.0 && std::isfinite(series_growth)))
        throw ValidationError("series growth must be finite and non-negative");
}

Checkpoint generate_checkpoint(const SynthSpec & spec, const Checkpoint * reference) {
    spec.validate();
    if (spec.conflict_fraction && !reference)
        throw ValidationError("conflict injection needs a reference checkpoint");

    Checkpoint out;
    std::vector<std::vector<float>> values(spec.tensors.size());
    for (std::size_t t = 0; t < spec.tensors.size(); ++t) {
        const SynthTensorSpec & ts = spec.tensors[t];
        KeyedStream stream = KeyedStream::for_tensor(spec.seed, ts.name);
        values[t].resize(spec_numel(ts));
        for (uint64_t i = 0; i < values[t].size(); ++i)
            values[t][i] = draw_value(spec, stream, i);
    }

    if (spec.conflict_fraction) {
        uint64_t total = 0;
        for (const SynthTensorSpec & ts : spec.tensors) total += spec_numel(ts);

        // Align signs with the reference, collecting flippable positions.
        struct Candidate {
            uint64_t    draw;
            std::size_t tensor;
            uint64_t    index;
        };
        std::vector<Candidate> candidates;
        const uint64_t flip_seed = splitmix64_mix(spec.seed ^ kFlipSalt);
        for (std::size_t t = 0; t < spec.tensors.size(); ++t) {
            const SynthTensorSpec & ts = spec.tensors[t];
            auto it = reference->tensors.find(ts.name);
            if (it == reference->tensors.end())
                throw ValidationError("reference checkpoint lacks tensor " + ts.name);
            std::vector<float> ref = it->second.values_f32();
            if (ref.size() != values[t].size())
                throw ValidationError("reference shape mismatch at tensor " + ts.name);
            KeyedStream flips = KeyedStream::for_tensor(flip_seed, ts.name);
            for (uint64_t i = 0; i < ref.size(); ++i) {
                if (ref[i] == 0.0f) continue;
                values[t][i] = std::copysign(values[t][i], ref[i]);
                if (values[t][i] != 0.0f)
                    candidates.push_back({flips.at(i), t, i});
            }
        }

        const uint64_t want = uint64_t(std::llround(*spec.conflict_fraction * double(total)));
        if (want > candidates.size())
            throw ValidationError(
                "not enough nonzero positions to inject the requested conflict fraction");
        auto less = [&](const Candidate & a, const Candidate & b) {
            if (a.draw != b.draw) return a.draw < b.draw;
            if (a.tensor != b.tensor)
                return spec.tensors[a.tensor].name < spec.tensors[b.tensor].name;
            return a.index < b.index;
        };
        if (want > 0 && want < candidates.size())
            std::nth_element(candidates.begin(), candidates.begin() + (want - 1),
                             candidates.end(), less);
        for (uint64_t c = 0; c < want; ++c)
            values[candidates[c].tensor][candidates[c].index] =
                -values[candidates[c].tensor][candidates[c].index];
    }

    for (std::size_t t = 0; t < spec.tensors.size(); ++t) {
        const SynthTensorSpec & ts = spec.tensors[t];
        Tensor tensor;
        tensor.dtype = ts.dtype;
        tensor.shape = ts.shape;
        tensor.data = from_f32(values[t], ts.dtype);
        out.tensors[ts.name] = std::move(tensor);
    }
    return out;
}

std::vector<Checkpoint> generate_ct_series(const SynthSpec & spec, uint64_t steps,
                                           double growth, const Checkpoint * reference) {
    if (steps < 1) throw ValidationError("series needs at least one step");
    if (!(growth >= 0.0) || !std::isfinite(growth))
        throw ValidationError("series growth must be finite and non-negative");

    Checkpoint base = generate_checkpoint(spec, reference);
    const uint64_t delta_seed = splitmix64_mix(spec.seed ^ kSeriesSalt);

    std::vector<Checkpoint> series;
    series.reserve(steps);
    for (uint64_t step = 1; step <= steps; ++step) {
        const float scale = float(growth * double(step));
        Checkpoint ck;
        for (const auto & [name, bt] : base.tensors) {
            std::vector<float> v = bt.values_f32();
            if (scale != 0.0f) {
                KeyedStream stream = KeyedStream::for_tensor(delta_seed, name);
                for (uint64_t i = 0; i < v.size(); ++i)
                    v[i] = v[i] + scale * uniform_pm1(stream.at(i));
            }
            Tensor t;
            t.dtype = bt.dtype;
            t.shape = bt.shape;
            t.data = from_f32(v, bt.dtype);
            ck.tensors[name] = std::move(t);
        }
        series.push_back(std::move(ck));
    }
    return series;
}

} // namespace ckmerge
