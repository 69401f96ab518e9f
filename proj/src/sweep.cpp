#include <algorithm>
#include <cerrno>
#include <chrono>
#include <cmath>
#include <csignal>
#include <cstdlib>
#include <cstring>
#include <iomanip>
#include <set>
#include <sstream>

#include <fcntl.h>
#include <poll.h>
#include <sys/wait.h>
#include <unistd.h>

#include <json.hpp>

#include "ckmerge/digest.hpp"
#include "ckmerge/errors.hpp"
#include "ckmerge/sweep.hpp"

namespace ckmerge {

using ordered_json = nlohmann::ordered_json;

namespace {

// A swept field is scale, slack, drop_p, or k<i> (1-based density index).
// Returns the density index for k<i>, 0 for the scalar fields.
std::size_t parse_field(const std::string & field, std::size_t n_models) {
    if (field == "scale" || field == "slack" || field == "drop_p") return 0;
    if (field.size() >= 2 && field[0] == 'k' && field[1] != '0') {
        std::size_t idx = 0;
        for (std::size_t i = 1; i < field.size(); ++i) {
            if (field[i] < '0' || field[i] > '9')
                throw ValidationError("unknown sweep field: " + field);
            idx = idx * 10 + std::size_t(field[i] - '0');
        }
        if (idx < 1 || idx > n_models)
            throw ValidationError("sweep field " + field + " has no matching model");
        return idx;
    }
    throw ValidationError("unknown sweep field: " + field);
}

std::string assignment_to_string(const Assignment & assignment) {
    std::ostringstream out;
    for (std::size_t i = 0; i < assignment.size(); ++i) {
        if (i) out << " ";
        out << assignment[i].first << "=" << assignment[i].second;
    }
    return out.str();
}

void remove_candidate_files(const std::filesystem::path & candidate) {
    std::error_code ec;
    std::filesystem::remove(candidate, ec);
    std::filesystem::remove(candidate.string() + ".manifest.json", ec);
}

[[noreturn]] void child_exec(const std::string & command, const std::string & candidate,
                             int out_fd) {
    // Own process group, so a timeout can kill the whole command tree, not
    // just the shell.
    setpgid(0, 0);
    if (dup2(out_fd, STDOUT_FILENO) < 0) _exit(127);
    close(out_fd);
    setenv("MERGE_CANDIDATE", candidate.c_str(), 1);
    execl("/bin/sh", "sh", "-c", command.c_str(), static_cast<char *>(nullptr));
    _exit(127);
}

// Kill the hook's process group; fall back to the shell pid if the group is
// already gone (the child sets the group before exec, the parent mirrors it,
// so one of the two targets always exists until the wait).
void kill_hook(pid_t pid) {
    if (kill(-pid, SIGKILL) != 0) kill(pid, SIGKILL);
}

} // namespace

SweepSpec SweepSpec::from_json(const std::string & text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception & e) {
        throw ValidationError(std::string("sweep spec is not valid JSON: ") + e.what());
    }
    if (!j.is_object()) throw ValidationError("sweep spec must be a JSON object");
    static const std::set<std::string> allowed = {"recipe",  "grid",           "eval_command",
                                                  "workdir", "keep_candidates", "timeout_seconds"};
    for (const auto & [key, value] : j.items())
        if (!allowed.count(key)) throw ValidationError("unknown sweep spec field: " + key);

    SweepSpec spec;
    if (!j.contains("recipe") || !j["recipe"].is_object())
        throw ValidationError("sweep spec needs a 'recipe' object");
    spec.recipe_template = MergeRecipe::from_json(j["recipe"].dump());

    if (j.contains("grid")) {
        if (!j["grid"].is_object())
            throw ValidationError("'grid' must map field names to value lists");
        for (const auto & [field, values] : j["grid"].items()) {
            if (!values.is_array()) throw ValidationError("grid lists must be arrays");
            std::vector<double> list;
            for (const auto & v : values) {
                if (!v.is_number()) throw ValidationError("grid values must be numbers");
                list.push_back(v.get<double>());
            }
            spec.grid[field] = std::move(list);
        }
    } else {
        // Default: every model's density over the standard six-value grid.
        for (std::size_t m = 1; m <= spec.recipe_template.models.size(); ++m)
            spec.grid["k" + std::to_string(m)] = {0.01, 0.2, 0.4, 0.6, 0.8, 1.0};
    }

    if (!j.contains("eval_command") || !j["eval_command"].is_string())
        throw ValidationError("sweep spec needs an 'eval_command' string");
    spec.eval_command = j["eval_command"].get<std::string>();

    if (j.contains("workdir")) {
        if (!j["workdir"].is_string()) throw ValidationError("'workdir' must be a string");
        spec.workdir = j["workdir"].get<std::string>();
    }
    if (j.contains("keep_candidates")) {
        if (!j["keep_candidates"].is_boolean())
            throw ValidationError("'keep_candidates' must be a boolean");
        spec.keep_candidates = j["keep_candidates"].get<bool>();
    }
    if (j.contains("timeout_seconds")) {
        if (!j["timeout_seconds"].is_number())
            throw ValidationError("'timeout_seconds' must be a number");
        spec.timeout_seconds = j["timeout_seconds"].get<double>();
    }
    spec.validate();
    return spec;
}

void SweepSpec::validate() const {
    recipe_template.validate();
    for (const auto & [field, values] : grid) {
        parse_field(field, recipe_template.models.size());
        if (values.empty()) throw ValidationError("empty grid list for field: " + field);
        for (double v : values)
            if (!std::isfinite(v))
                throw ValidationError("grid values must be finite for field: " + field);
    }
    if (eval_command.empty()) throw ValidationError("sweep spec needs an eval command");
    if (timeout_seconds && !(*timeout_seconds > 0.0))
        throw ValidationError("timeout must be positive");
}

std::vector<Assignment> enumerate_grid(const SweepSpec & spec) {
    spec.validate();
    // An empty grid means the standard density sweep, however the spec was
    // built; the JSON parser pre-expands the same default.
    std::map<std::string, std::vector<double>> defaults;
    if (spec.grid.empty())
        for (std::size_t m = 1; m <= spec.recipe_template.models.size(); ++m)
            defaults["k" + std::to_string(m)] = {0.01, 0.2, 0.4, 0.6, 0.8, 1.0};
    const auto & grid = spec.grid.empty() ? defaults : spec.grid;
    std::vector<std::pair<std::string, const std::vector<double> *>> fields;
    for (const auto & [field, values] : grid) fields.emplace_back(field, &values);

    std::vector<Assignment> out;
    std::vector<std::size_t> odo(fields.size(), 0);
    for (;;) {
        Assignment a;
        a.reserve(fields.size());
        for (std::size_t f = 0; f < fields.size(); ++f)
            a.emplace_back(fields[f].first, (*fields[f].second)[odo[f]]);
        out.push_back(std::move(a));
        if (fields.empty()) break;
        std::size_t f = fields.size();
        while (f > 0) {
            --f;
            if (++odo[f] < fields[f].second->size()) break;
            odo[f] = 0;
            if (f == 0) return out;
        }
    }
    return out;
}

MergeRecipe materialize(const MergeRecipe & recipe_template, const Assignment & assignment) {
    MergeRecipe r = recipe_template;
    for (const auto & [field, value] : assignment) {
        std::size_t k = parse_field(field, r.models.size());
        if (field == "scale")
            r.scale = value;
        else if (field == "slack")
            r.slack = value;
        else if (field == "drop_p")
            r.drop_p = value;
        else
            r.densities[k - 1] = value;
    }
    return r;
}

double run_eval_hook(const std::string & command, const std::filesystem::path & candidate,
                     std::optional<double> timeout_seconds) {
    std::string cmd = command;
    const std::string token = "{candidate}";
    const std::string path = candidate.string();
    for (std::size_t pos = 0; (pos = cmd.find(token, pos)) != std::string::npos;
         pos += path.size())
        cmd.replace(pos, token.size(), path);

    int fds[2];
    if (pipe(fds) != 0) throw IoError("cannot create a pipe for the eval hook");
    pid_t pid = fork();
    if (pid < 0) {
        close(fds[0]);
        close(fds[1]);
        throw IoError("cannot fork the eval hook");
    }
    if (pid == 0) {
        close(fds[0]);
        child_exec(cmd, path, fds[1]);
    }
    setpgid(pid, pid);  // mirror the child's setpgid to close the fork race
    close(fds[1]);

    const auto deadline = std::chrono::steady_clock::now() +
                          std::chrono::duration_cast<std::chrono::steady_clock::duration>(
                              std::chrono::duration<double>(timeout_seconds.value_or(0.0)));
    auto expired = [&] {
        return timeout_seconds && std::chrono::steady_clock::now() >= deadline;
    };
    auto fail_timeout = [&]() -> ValidationError {
        kill_hook(pid);
        int status = 0;
        waitpid(pid, &status, 0);
        close(fds[0]);
        return ValidationError("eval hook timed out: " + cmd);
    };

    std::string output;
    char buf[4096];
    for (;;) {
        int wait_ms = -1;
        if (timeout_seconds) {
            auto left = std::chrono::duration_cast<std::chrono::milliseconds>(
                            deadline - std::chrono::steady_clock::now())
                            .count();
            if (left <= 0) throw fail_timeout();
            wait_ms = int(std::min<long long>(left, 1000));
        }
        struct pollfd p = {fds[0], POLLIN, 0};
        int rc = poll(&p, 1, wait_ms);
        if (rc < 0) {
            if (errno == EINTR) continue;
            kill_hook(pid);
            waitpid(pid, nullptr, 0);
            close(fds[0]);
            throw IoError("poll failed while reading the eval hook");
        }
        if (rc == 0) continue;  // re-check the deadline
        ssize_t n = read(fds[0], buf, sizeof buf);
        if (n < 0) {
            if (errno == EINTR) continue;
            kill_hook(pid);
            waitpid(pid, nullptr, 0);
            close(fds[0]);
            throw IoError("read failed while reading the eval hook");
        }
        if (n == 0) break;
        output.append(buf, std::size_t(n));
    }
    close(fds[0]);

    int status = 0;
    for (;;) {
        pid_t r = waitpid(pid, &status, timeout_seconds ? WNOHANG : 0);
        if (r == pid) break;
        if (r < 0 && errno != EINTR) throw IoError("waitpid failed for the eval hook");
        if (r == 0) {
            if (expired()) throw fail_timeout();
            usleep(2000);
        }
    }
    if (!WIFEXITED(status) || WEXITSTATUS(status) != 0) {
        std::ostringstream msg;
        msg << "eval hook failed (";
        if (WIFEXITED(status))
            msg << "exit status " << WEXITSTATUS(status);
        else if (WIFSIGNALED(status))
            msg << "signal " << WTERMSIG(status);
        else
            msg << "status " << status;
        msg << "): " << cmd;
        throw ValidationError(msg.str());
    }

    // Last non-empty line, whitespace-trimmed, parsed as a finite decimal.
    std::string line;
    std::size_t end = output.size();
    while (line.empty() && end > 0) {
        std::size_t start = output.find_last_of('\n', end - 1);
        std::size_t begin = (start == std::string::npos) ? 0 : start + 1;
        line = output.substr(begin, end - begin);
        std::size_t a = line.find_first_not_of(" \t\r\n");
        std::size_t b = line.find_last_not_of(" \t\r\n");
        line = (a == std::string::npos) ? "" : line.substr(a, b - a + 1);
        end = (start == std::string::npos) ? 0 : start;
    }
    if (line.empty()) throw ValidationError("eval hook produced no score line: " + cmd);
    errno = 0;
    char * tail = nullptr;
    double score = std::strtod(line.c_str(), &tail);
    if (tail == line.c_str() || *tail != '\0' || errno == ERANGE || !std::isfinite(score))
        throw ValidationError("eval hook score is not a finite decimal: '" + line + "'");
    return score;
}

SweepResult grid_search(const SweepSpec & spec, int threads) {
    spec.validate();
    std::vector<Assignment> assignments = enumerate_grid(spec);
    std::filesystem::create_directories(spec.workdir);

    SweepResult result;
    result.candidates.reserve(assignments.size());
    std::optional<std::size_t> best;  // enumeration index of the best so far

    for (std::size_t i = 0; i < assignments.size(); ++i) {
        CandidateOutcome outcome;
        outcome.index = i;
        outcome.assignment = assignments[i];
        const std::filesystem::path candidate =
            spec.workdir / ("candidate_" + std::to_string(i) + ".safetensors");
        try {
            MergeRecipe recipe = materialize(spec.recipe_template, assignments[i]);
            MergeManifest manifest = run_recipe(recipe, candidate, threads);
            outcome.fingerprint = manifest.output_fingerprint;
            outcome.score = run_eval_hook(spec.eval_command, candidate, spec.timeout_seconds);
            outcome.ok = true;
        } catch (const ValidationError & e) {
            outcome.failure = std::string(e.what()) + " [" +
                              assignment_to_string(assignments[i]) + "]";
        } catch (const IoError & e) {
            outcome.failure = std::string(e.what()) + " [" +
                              assignment_to_string(assignments[i]) + "]";
        }

        if (!spec.keep_candidates) {
            if (!outcome.ok) {
                remove_candidate_files(candidate);
            } else if (!best || outcome.score > result.candidates[*best].score) {
                if (best)
                    remove_candidate_files(
                        spec.workdir /
                        ("candidate_" + std::to_string(*best) + ".safetensors"));
                best = i;
            } else {
                remove_candidate_files(candidate);
            }
        } else if (outcome.ok && (!best || outcome.score > result.candidates[*best].score)) {
            best = i;
        }
        result.candidates.push_back(std::move(outcome));
    }

    for (std::size_t i = 0; i < result.candidates.size(); ++i)
        if (result.candidates[i].ok) result.ranking.push_back(i);
    if (result.ranking.empty()) throw ValidationError("every sweep candidate failed");
    std::sort(result.ranking.begin(), result.ranking.end(),
              [&](std::size_t a, std::size_t b) {
                  if (result.candidates[a].score != result.candidates[b].score)
                      return result.candidates[a].score > result.candidates[b].score;
                  return a < b;
              });
    result.best_index = result.ranking[0];
    result.best_recipe = materialize(spec.recipe_template,
                                     result.candidates[result.best_index].assignment);
    return result;
}

std::string render_sweep_table(const SweepResult & result) {
    std::ostringstream out;
    out << std::setw(6) << "index" << "  " << std::setw(14) << "score" << "  "
        << std::setw(16) << "fingerprint" << "  assignment\n";
    for (const CandidateOutcome & c : result.candidates) {
        out << std::setw(6) << c.index << "  ";
        if (c.ok)
            out << std::setw(14) << std::setprecision(8) << c.score << "  " << std::setw(16)
                << to_hex(c.fingerprint);
        else
            out << std::setw(14) << "FAILED" << "  " << std::setw(16) << "-";
        out << "  " << assignment_to_string(c.assignment);
        if (c.ok && c.index == result.best_index) out << "  <- best";
        if (!c.ok) out << "  (" << c.failure << ")";
        out << "\n";
    }
    out << "best: index " << result.best_index << ", "
        << assignment_to_string(result.best().assignment) << ", score "
        << std::setprecision(8) << result.best().score << "\n";
    return out.str();
}

std::string render_sweep_doc(const SweepResult & result) {
    ordered_json j;
    ordered_json arr = ordered_json::array();
    for (const CandidateOutcome & c : result.candidates) {
        ordered_json rec;
        rec["index"] = c.index;
        ordered_json a = ordered_json::object();
        for (const auto & [field, value] : c.assignment) a[field] = value;
        rec["assignment"] = std::move(a);
        rec["ok"] = c.ok;
        if (c.ok) {
            rec["score"] = c.score;
            rec["fingerprint"] = to_hex(c.fingerprint);
        } else {
            rec["failure"] = c.failure;
        }
        arr.push_back(std::move(rec));
    }
    j["candidates"] = std::move(arr);
    j["ranking"] = result.ranking;
    j["best_index"] = result.best_index;
    j["best_score"] = result.best().score;
    j["best_recipe"] = ordered_json::parse(result.best_recipe.to_json());
    return j.dump(2);
}

} // namespace ckmerge
