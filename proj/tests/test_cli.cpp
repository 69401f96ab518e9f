#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <sys/wait.h>
#include <vector>

#include "ckmerge/conflict.hpp"
#include "ckmerge/digest.hpp"
#include "ckmerge/synth.hpp"
#include "ckmerge/taskvec.hpp"
#include "ckmerge/tensorio.hpp"
#include "ckmerge/ties.hpp"
#include "oracles.hpp"

using namespace ckmerge;
namespace fs = std::filesystem;

namespace {

struct RunResult {
    int         exit_code = -1;
    std::string output;  // stdout and stderr interleaved
};

// Runs the installed binary through the shell; arguments must be pre-quoted.
RunResult run_cli(const std::string & args) {
    std::string cmd = std::string(CKMERGE_BIN) + " " + args + " 2>&1";
    FILE * pipe = popen(cmd.c_str(), "r");
    REQUIRE(pipe != nullptr);
    RunResult r;
    char buf[4096];
    std::size_t n;
    while ((n = fread(buf, 1, sizeof buf, pipe)) > 0) r.output.append(buf, n);
    int status = pclose(pipe);
    r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
}

struct Scratch {
    fs::path dir;

    explicit Scratch(const std::string & tag)
        : dir(fs::temp_directory_path() / ("ckmerge_cli_" + tag)) {
        fs::remove_all(dir);
        fs::create_directories(dir);
    }
    ~Scratch() { fs::remove_all(dir); }

    std::string operator/(const std::string & leaf) const { return (dir / leaf).string(); }
};

Checkpoint ckpt_of(const oracle::Model & m) {
    Checkpoint ck;
    for (const auto & [name, v] : m) ck.tensors[name] = make_tensor_f32({v.size()}, v);
    return ck;
}

std::string file_bytes(const fs::path & p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in.good());
    return std::string(std::istreambuf_iterator<char>(in), {});
}

void write_text(const fs::path & p, const std::string & text) {
    std::ofstream out(p);
    out << text;
}

const std::string kWorked4Recipe = R"({
    "algorithm": "ties",
    "base": "%BASE%",
    "models": ["%M1%", "%M2%"],
    "densities": [0.5, 0.5]
})";

std::string substitute(std::string text, const std::string & from, const std::string & to) {
    for (std::size_t pos; (pos = text.find(from)) != std::string::npos;)
        text.replace(pos, from.size(), to);
    return text;
}

} // namespace

TEST_CASE("inspect lists tensors and totals") {
    Scratch s("inspect");
    Checkpoint ck = ckpt_of({{"alpha", {1.0f, 2.0f}}, {"beta", {3.0f}}});
    ck.metadata["origin"] = "fixture";
    write_checkpoint(ck, s / "a.safetensors");

    RunResult table = run_cli("inspect " + (s / "a.safetensors"));
    CHECK(table.exit_code == 0);
    CHECK(table.output.find("alpha") != std::string::npos);
    CHECK(table.output.find("beta") != std::string::npos);
    CHECK(table.output.find("F32") != std::string::npos);

    RunResult doc = run_cli("--format doc inspect " + (s / "a.safetensors"));
    CHECK(doc.exit_code == 0);
    auto j = nlohmann::json::parse(doc.output);
    CHECK(j["tensor_count"] == 2);
    CHECK(j["total_bytes"] == 12);
    CHECK(j["metadata"]["origin"] == "fixture");
    REQUIRE(j["tensors"].is_array());
    CHECK(j["tensors"][0]["name"] == "alpha");
    CHECK(j["tensors"][0]["dtype"] == "F32");
    CHECK(j["tensors"][0]["shape"] == nlohmann::json::array({2}));
}

TEST_CASE("inspect on a corrupt container exits with the I/O code") {
    Scratch s("corrupt");
    write_text(s / "bad.safetensors", "definitely not a container");
    RunResult r = run_cli("inspect " + (s / "bad.safetensors"));
    CHECK(r.exit_code == 2);
    CHECK_FALSE(r.output.empty());

    RunResult missing = run_cli("inspect " + (s / "absent.safetensors"));
    CHECK(missing.exit_code == 2);
}

TEST_CASE("diff reports the delta norms") {
    Scratch s("diff");
    write_checkpoint(ckpt_of({{"w", {0.0f, 0.0f}}}), s / "base.safetensors");
    write_checkpoint(ckpt_of({{"w", {3.0f, 4.0f}}}), s / "tuned.safetensors");
    RunResult doc = run_cli("--format doc diff " + (s / "base.safetensors") + " " +
                            (s / "tuned.safetensors"));
    CHECK(doc.exit_code == 0);
    auto j = nlohmann::json::parse(doc.output);
    REQUIRE(j["per_tensor"].contains("w"));
    CHECK(j["per_tensor"]["w"]["l2"] == doctest::Approx(5.0).epsilon(1e-12));
    CHECK(j["per_tensor"]["w"]["max_abs"] == doctest::Approx(4.0).epsilon(1e-12));
    CHECK(j["per_tensor"]["w"]["nonzero_fraction"] == doctest::Approx(1.0));
    CHECK(j["global"]["l2"] == doctest::Approx(5.0).epsilon(1e-12));

    RunResult table = run_cli("diff " + (s / "base.safetensors") + " " +
                              (s / "tuned.safetensors"));
    CHECK(table.exit_code == 0);
    CHECK(table.output.find("w") != std::string::npos);
}

TEST_CASE("diff rejects mismatched structures") {
    Scratch s("diffbad");
    write_checkpoint(ckpt_of({{"w", {0.0f}}}), s / "a.safetensors");
    write_checkpoint(ckpt_of({{"v", {0.0f}}}), s / "b.safetensors");
    RunResult r = run_cli("diff " + (s / "a.safetensors") + " " + (s / "b.safetensors"));
    CHECK(r.exit_code == 1);
}

TEST_CASE("merge reproduces the worked example through files") {
    Scratch s("merge");
    write_checkpoint(ckpt_of({{"w", {0.0f, 0.0f, 0.0f, 0.0f}}}), s / "base.safetensors");
    write_checkpoint(ckpt_of({{"w", {2.0f, -1.0f, 0.5f, 3.0f}}}), s / "m1.safetensors");
    write_checkpoint(ckpt_of({{"w", {1.0f, 1.0f, -2.0f, -3.0f}}}), s / "m2.safetensors");
    std::string recipe = substitute(kWorked4Recipe, "%BASE%", s / "base.safetensors");
    recipe = substitute(recipe, "%M1%", s / "m1.safetensors");
    recipe = substitute(recipe, "%M2%", s / "m2.safetensors");
    write_text(s / "recipe.json", recipe);

    RunResult r = run_cli("merge --recipe " + (s / "recipe.json") + " --out " +
                          (s / "out.safetensors"));
    CHECK(r.exit_code == 0);
    Checkpoint out = read_checkpoint(s / "out.safetensors");
    CHECK(out.tensors.at("w").values_f32() ==
          std::vector<float>{2.0f, 0.0f, -2.0f, 0.0f});
    CHECK(fs::exists((s / "out.safetensors") + ".manifest.json"));

    // The doc format prints the manifest itself.
    RunResult doc = run_cli("--format doc merge --recipe " + (s / "recipe.json") +
                            " --out " + (s / "out2.safetensors"));
    CHECK(doc.exit_code == 0);
    auto j = nlohmann::json::parse(doc.output);
    CHECK(j["recipe"]["algorithm"] == "ties");
    CHECK(j["output_fingerprint"] ==
          to_hex(read_checkpoint(s / "out2.safetensors").fingerprint()));
}

TEST_CASE("merge with zero scale copies the base") {
    Scratch s("mergezero");
    Checkpoint base = ckpt_of({{"w", {-0.0f, 1.5f, -2.0f}}});
    write_checkpoint(base, s / "base.safetensors");
    write_checkpoint(ckpt_of({{"w", {1.0f, 2.0f, 3.0f}}}), s / "m1.safetensors");
    write_checkpoint(ckpt_of({{"w", {2.0f, 3.0f, 4.0f}}}), s / "m2.safetensors");
    nlohmann::json recipe = {{"algorithm", "ties"},
                             {"base", s / "base.safetensors"},
                             {"models", {s / "m1.safetensors", s / "m2.safetensors"}},
                             {"densities", {1.0, 1.0}},
                             {"scale", 0.0}};
    write_text(s / "recipe.json", recipe.dump());
    RunResult r = run_cli("merge --recipe " + (s / "recipe.json") + " --out " +
                          (s / "out.safetensors"));
    CHECK(r.exit_code == 0);
    CHECK(read_checkpoint(s / "out.safetensors").tensors.at("w").data ==
          base.tensors.at("w").data);
}

TEST_CASE("merge rejects a slack recipe with three models") {
    Scratch s("mergebad");
    for (const char * name : {"base", "m1", "m2", "m3"})
        write_checkpoint(ckpt_of({{"w", {1.0f}}}), s / (std::string(name) + ".safetensors"));
    nlohmann::json recipe = {
        {"algorithm", "ties_sv"},
        {"base", s / "base.safetensors"},
        {"models",
         {s / "m1.safetensors", s / "m2.safetensors", s / "m3.safetensors"}},
        {"densities", {0.5, 0.5, 0.5}},
        {"slack", 0.1}};
    write_text(s / "recipe.json", recipe.dump());
    RunResult r = run_cli("merge --recipe " + (s / "recipe.json") + " --out " +
                          (s / "out.safetensors"));
    CHECK(r.exit_code == 1);
    CHECK(r.output.find("two models") != std::string::npos);
}

TEST_CASE("analyze agrees with the library's report") {
    Scratch s("analyze");
    SynthSpec spec;
    spec.seed = 500;
    spec.tensors.push_back({"w", {256}, Dtype::F32});
    Checkpoint base = generate_checkpoint(spec);
    spec.seed = 501;
    Checkpoint prot = generate_checkpoint(spec);
    spec.seed = 502;
    Checkpoint other = generate_checkpoint(spec);
    write_checkpoint(base, s / "base.safetensors");
    write_checkpoint(prot, s / "prot.safetensors");
    write_checkpoint(other, s / "other.safetensors");

    RunResult r = run_cli("--format doc analyze --protected " + (s / "prot.safetensors") +
                          " --other " + (s / "other.safetensors") + " --base " +
                          (s / "base.safetensors") + " --k-protected 0.2 --k-other 1.0");
    CHECK(r.exit_code == 0);
    auto j = nlohmann::json::parse(r.output);

    TrimmedDelta tp = trim(compute_task_vector(prot, base), 0.2, Granularity::Global);
    TrimmedDelta to = trim(compute_task_vector(other, base), 1.0, Granularity::Global);
    ConflictReport expect = conflict_report(tp, to);
    CHECK(j["total"]["conflicts"] == expect.total.conflicts);
    CHECK(j["total"]["discarded_protected"] == expect.total.discarded_protected);
    CHECK(j["total"]["retained_protected"] == expect.total.retained_protected);
    CHECK(j["total"]["discard_proportion"] ==
          doctest::Approx(expect.total.discard_proportion()).epsilon(1e-12));
}

TEST_CASE("series carries tags verbatim in order") {
    Scratch s("series");
    SynthSpec spec;
    spec.seed = 600;
    spec.tensors.push_back({"w", {128}, Dtype::F32});
    Checkpoint base = generate_checkpoint(spec);
    write_checkpoint(base, s / "base.safetensors");
    spec.seed = 601;
    write_checkpoint(generate_checkpoint(spec), s / "prot.safetensors");
    std::vector<Checkpoint> series = generate_ct_series(spec, 3, 0.5);
    for (std::size_t i = 0; i < series.size(); ++i)
        write_checkpoint(series[i], s / ("ck" + std::to_string(i) + ".safetensors"));

    RunResult r = run_cli("--format doc series --base " + (s / "base.safetensors") +
                          " --protected " + (s / "prot.safetensors") + " --checkpoints " +
                          (s / "ck0.safetensors") + " " + (s / "ck1.safetensors") + " " +
                          (s / "ck2.safetensors") + " --tags 4.8B 9.6B 14.4B");
    CHECK(r.exit_code == 0);
    auto j = nlohmann::json::parse(r.output);
    REQUIRE(j.is_array());
    REQUIRE(j.size() == 3);
    CHECK(j[0]["tag"] == "4.8B");
    CHECK(j[1]["tag"] == "9.6B");
    CHECK(j[2]["tag"] == "14.4B");
    for (const auto & rec : j) CHECK(rec.contains("discard_proportion"));
}

TEST_CASE("series tag count mismatches exit with a validation error") {
    Scratch s("seriesbad");
    SynthSpec spec;
    spec.seed = 610;
    spec.tensors.push_back({"w", {16}, Dtype::F32});
    write_checkpoint(generate_checkpoint(spec), s / "base.safetensors");
    spec.seed = 611;
    write_checkpoint(generate_checkpoint(spec), s / "prot.safetensors");
    spec.seed = 612;
    write_checkpoint(generate_checkpoint(spec), s / "ck.safetensors");
    RunResult r = run_cli("series --base " + (s / "base.safetensors") + " --protected " +
                          (s / "prot.safetensors") + " --checkpoints " +
                          (s / "ck.safetensors") + " --tags a b");
    CHECK(r.exit_code == 1);
}

TEST_CASE("synth writes deterministic files") {
    Scratch s("synth");
    nlohmann::json spec = {{"seed", 2024},
                           {"tensors", {{{"name", "w"}, {"shape", {64}}}}}};
    write_text(s / "spec.json", spec.dump());
    RunResult r1 = run_cli("synth --spec " + (s / "spec.json") + " --out " +
                           (s / "a.safetensors"));
    CHECK(r1.exit_code == 0);
    RunResult r2 = run_cli("synth --spec " + (s / "spec.json") + " --out " +
                           (s / "b.safetensors"));
    CHECK(r2.exit_code == 0);
    CHECK(file_bytes(s / "a.safetensors") == file_bytes(s / "b.safetensors"));
    // The values match the in-process generator.
    SynthSpec parsed = SynthSpec::from_json(spec.dump());
    CHECK(read_checkpoint(s / "a.safetensors") == generate_checkpoint(parsed));
}

TEST_CASE("synth series emits one numbered file per step") {
    Scratch s("synthseries");
    nlohmann::json spec = {{"seed", 2025},
                           {"tensors", {{{"name", "w"}, {"shape", {32}}}}},
                           {"series", {{"steps", 3}, {"growth", 0.5}}}};
    write_text(s / "spec.json", spec.dump());
    RunResult r = run_cli("synth --spec " + (s / "spec.json") + " --out " +
                          (s / "ck.safetensors"));
    CHECK(r.exit_code == 0);
    for (int i = 1; i <= 3; ++i) {
        std::string path = s / ("ck_" + std::to_string(i) + ".safetensors");
        CHECK(fs::exists(path));
        CHECK(r.output.find(path) != std::string::npos);
    }
    SynthSpec parsed = SynthSpec::from_json(spec.dump());
    std::vector<Checkpoint> expect = generate_ct_series(parsed, 3, 0.5);
    CHECK(read_checkpoint(s / "ck_2.safetensors") == expect[1]);
}

TEST_CASE("sweep selects the first candidate under a constant hook") {
    Scratch s("sweep");
    SynthSpec gen;
    gen.seed = 700;
    gen.tensors.push_back({"w", {48}, Dtype::F32});
    write_checkpoint(generate_checkpoint(gen), s / "base.safetensors");
    gen.seed = 701;
    write_checkpoint(generate_checkpoint(gen), s / "m1.safetensors");
    gen.seed = 702;
    write_checkpoint(generate_checkpoint(gen), s / "m2.safetensors");

    nlohmann::json spec = {
        {"recipe",
         {{"algorithm", "ties"},
          {"base", s / "base.safetensors"},
          {"models", {s / "m1.safetensors", s / "m2.safetensors"}},
          {"densities", {0.5, 0.5}}}},
        {"grid", {{"k1", {0.2, 0.6, 1.0}}}},
        {"eval_command", "echo 42"},
        {"workdir", s.dir.string()}};
    write_text(s / "sweep.json", spec.dump());

    RunResult r = run_cli("--format doc sweep --spec " + (s / "sweep.json"));
    CHECK(r.exit_code == 0);
    auto j = nlohmann::json::parse(r.output);
    CHECK(j["best_index"] == 0);
    CHECK(j["best_score"] == 42.0);
    CHECK(j["candidates"].size() == 3);
    CHECK(j["best_recipe"]["densities"][0] == 0.2);
}

TEST_CASE("usage errors exit with the validation code") {
    RunResult none = run_cli("");
    CHECK(none.exit_code != 0);
    RunResult unknown = run_cli("frobnicate");
    CHECK(unknown.exit_code != 0);
    RunResult badformat = run_cli("--format yaml inspect x");
    CHECK(badformat.exit_code != 0);
}
