#pragma once

// Single entry point with subcommands: generate-world, train, eval,
// dump-attention, plot. Every run resolves one flat configuration
// (defaults, then --config file, then --set pairs, then dedicated flags),
// writes a manifest.json before any other output, and marks whatever it
// managed to write as ".partial" if it fails midway.

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "atd/checkpoint.hpp"
#include "atd/config.hpp"
#include "atd/serialize.hpp"
#include "atd/svgplot.hpp"
#include "atd/training.hpp"

namespace atd::cli {

namespace fs = std::filesystem;

inline std::string iso_now() {
    const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

inline std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

// ---------------------------------------------------------------------------
// run bookkeeping: manifest-first output discipline

struct RunContext {
    std::string command;
    fs::path out_dir;
    config::Flat resolved;
    config::Flat given;  // resolved minus the defaults: file, --set, and flag values only
    nlohmann::json inputs = nlohmann::json::array();
    std::vector<fs::path> outputs;  // declared product files, manifest excluded
    std::string started = iso_now();
    bool manifest_written = false;

    void declare(const fs::path& p) { outputs.push_back(p); }
    fs::path manifest_path() const { return out_dir / "manifest.json"; }
};

inline void write_manifest(RunContext& rc, const std::string& status) {
    nlohmann::json outs = nlohmann::json::array();
    for (const auto& p : rc.outputs) outs.push_back(p.string());
    const nlohmann::json m{{"command", rc.command},
                           {"version", std::string(kVersion)},
                           {"config", config::to_json(rc.resolved)},
                           {"seeds", {{"master", config::get_int(rc.resolved, "seed", 1)}}},
                           {"inputs", rc.inputs},
                           {"outputs", outs},
                           {"started_at", rc.started},
                           {"finished_at", status == "running" ? "" : iso_now()},
                           {"status", status}};
    std::ofstream f(rc.manifest_path(), std::ios::trunc);
    if (!f) throw IoError("cannot write " + rc.manifest_path().string());
    f << m.dump(2) << "\n";
    require(f.good(), "short write to ", rc.manifest_path().string());
    rc.manifest_written = true;
}

/// Creates the output directory, enforces --force against declared outputs,
/// and writes the running manifest before anything else is produced.
inline void begin_run(RunContext& rc, bool force) {
    std::error_code ec;
    fs::create_directories(rc.out_dir, ec);
    require(!ec, rc.command, ": cannot create ", rc.out_dir.string(), ": ", ec.message());
    if (!force) {
        for (const auto& p : rc.outputs)
            require(!fs::exists(p), rc.command, ": output ", p.string(),
                    " already exists (pass --force to overwrite)");
        require(!fs::exists(rc.manifest_path()), rc.command, ": ",
                rc.manifest_path().string(), " already exists (pass --force to overwrite)");
    }
    write_manifest(rc, "running");
}

inline void finish_run(RunContext& rc) { write_manifest(rc, "ok"); }

/// Failure path: declared outputs that exist are renamed *.partial and the
/// manifest records the failed status. Before the manifest exists nothing has
/// been produced, so nothing is touched (the files on disk belong to an
/// earlier run). Never throws.
inline void abort_run(RunContext& rc) noexcept {
    if (!rc.manifest_written) return;
    for (const auto& p : rc.outputs) {
        std::error_code ec;
        if (fs::exists(p, ec)) fs::rename(p, fs::path(p.string() + ".partial"), ec);
    }
    try {
        write_manifest(rc, "failed");
    } catch (...) {
    }
}

// ---------------------------------------------------------------------------
// configuration keys

inline config::Flat base_defaults() {
    return {
        {"seed", "1"},
        {"workers", "1"},
        // world generation
        {"world.count", "200"},
        {"world.unseen", "50"},
        {"world.nodes_min", "8"},
        {"world.nodes_max", "12"},
        {"world.vocab", "6"},
        {"world.view_dim", "16"},
        {"world.max_degree", "4"},
        {"world.min_separation", "3.5"},
        {"world.extra_edge_prob", "0.35"},
        {"world.noise_std", "1"},
        {"world.episodes_per_world", "2"},
        // model architecture
        {"model.d_m", "64"},
        {"model.heads", "4"},
        {"model.blocks", "2"},
        {"model.state_tokens", "4"},
        {"model.group_tokens", "4"},
        {"model.progress_classes", "8"},
        {"model.ffn_mult", "2"},
        {"model.sgca_d", "0"},  // 0: same as model.d_m
        {"model.tau", "0"},     // 0: 1/sqrt(model.sgca_d)
        {"model.policy_heads", "4"},
        {"model.policy_layers", "2"},
        {"model.dist_clip", "30"},
        // training
        {"train.ablate", "none"},
        {"train.batch_size", "2"},
        {"train.learning_rate", "1e-05"},
        {"train.weight_decay", "0.05"},
        {"train.lambda_bc", "1"},
        {"train.sgca_layers", "4"},
        {"train.brain_freeze", "true"},
        {"train.warmup_steps", "5000"},
        {"train.max_steps", "20000"},
        {"train.eval_every", "1000"},
        {"train.eval_episodes_per_world", "2"},
        {"train.max_eval_worlds", "50"},
        {"train.step_cap", "15"},
        {"train.min_hops", "3"},
        {"train.max_hops", "7"},
        {"train.success_radius", "3"},
        {"train.pid_memory_only_labels", "false"},
    };
}

inline world::WorldConfig world_config_from(const config::Flat& c, int node_count) {
    world::WorldConfig wc;
    wc.node_count = node_count;
    wc.landmark_vocab = static_cast<int>(config::get_int(c, "world.vocab", 6));
    wc.view_dim = static_cast<int>(config::get_int(c, "world.view_dim", 16));
    wc.max_degree = static_cast<int>(config::get_int(c, "world.max_degree", 4));
    wc.min_separation = config::get_double(c, "world.min_separation", 3.5);
    wc.extra_edge_prob = config::get_double(c, "world.extra_edge_prob", 0.35);
    wc.view_noise_std = config::get_double(c, "world.noise_std", 1.0);
    return wc;
}

/// Model built from model.* keys; the world's landmark vocabulary and view
/// width are facts of the data, never of the config file.
inline train::ModelConfig model_config_from(const config::Flat& c, int vocab, int view_dim) {
    train::ModelConfig mc;
    mc.brain.d_m = static_cast<int>(config::get_int(c, "model.d_m", 64));
    mc.brain.n_heads = static_cast<int>(config::get_int(c, "model.heads", 4));
    mc.brain.n_blocks = static_cast<int>(config::get_int(c, "model.blocks", 2));
    mc.brain.state_tokens = static_cast<int>(config::get_int(c, "model.state_tokens", 4));
    mc.brain.group_tokens = static_cast<int>(config::get_int(c, "model.group_tokens", 4));
    mc.brain.progress_classes =
        static_cast<int>(config::get_int(c, "model.progress_classes", 8));
    mc.brain.ffn_mult = static_cast<int>(config::get_int(c, "model.ffn_mult", 2));
    mc.brain.landmark_vocab = vocab;
    mc.brain.view_dim = view_dim;
    mc.grounding.d_m = mc.brain.d_m;
    const long long sgca_d = config::get_int(c, "model.sgca_d", 0);
    mc.grounding.d = sgca_d == 0 ? mc.brain.d_m : static_cast<Eigen::Index>(sgca_d);
    mc.grounding.n_layers = static_cast<int>(config::get_int(c, "train.sgca_layers", 4));
    mc.grounding.tau = config::get_double(c, "model.tau", 0.0);
    mc.pol.d_m = mc.brain.d_m;
    mc.pol.n_heads = static_cast<int>(config::get_int(c, "model.policy_heads", 4));
    mc.pol.l_x = static_cast<int>(config::get_int(c, "model.policy_layers", 2));
    mc.pol.view_dim = view_dim;
    mc.pol.dist_clip = config::get_double(c, "model.dist_clip", 30.0);
    mc.ablation = train::ablation_from_string(config::get_str(c, "train.ablate", "none"));
    return mc;
}

inline train::TrainConfig train_config_from(const config::Flat& c, const std::string& out_dir) {
    train::TrainConfig tc;
    tc.seed = static_cast<std::uint64_t>(config::get_int(c, "seed", 1));
    tc.batch_size = static_cast<int>(config::get_int(c, "train.batch_size", 2));
    tc.learning_rate = config::get_double(c, "train.learning_rate", 1e-5);
    tc.weight_decay = config::get_double(c, "train.weight_decay", 0.05);
    tc.lambda_bc = config::get_double(c, "train.lambda_bc", 1.0);
    tc.n_layers_sgca = static_cast<int>(config::get_int(c, "train.sgca_layers", 4));
    tc.brain_freeze = config::get_bool(c, "train.brain_freeze", true);
    tc.warmup_steps = static_cast<int>(config::get_int(c, "train.warmup_steps", 5000));
    tc.max_steps = static_cast<int>(config::get_int(c, "train.max_steps", 20000));
    tc.eval_every = static_cast<int>(config::get_int(c, "train.eval_every", 1000));
    tc.eval_episodes_per_world =
        static_cast<int>(config::get_int(c, "train.eval_episodes_per_world", 2));
    tc.max_eval_worlds = static_cast<int>(config::get_int(c, "train.max_eval_worlds", 50));
    tc.step_cap = static_cast<int>(config::get_int(c, "train.step_cap", 15));
    tc.pid_memory_only_labels = config::get_bool(c, "train.pid_memory_only_labels", false);
    tc.ep_min_hops = static_cast<int>(config::get_int(c, "train.min_hops", 3));
    tc.ep_max_hops = static_cast<int>(config::get_int(c, "train.max_hops", 7));
    tc.success_radius = config::get_double(c, "train.success_radius", 3.0);
    tc.log_dir = out_dir;
    return tc;
}

/// Every violated constraint, not just the first: a bad config fails with the
/// complete list before any work starts.
inline std::vector<std::string> validate_train_setup(const train::TrainConfig& tc,
                                                     const train::ModelConfig& mc) {
    std::vector<std::string> errs;
    auto check = [&](bool ok, const std::string& msg) {
        if (!ok) errs.push_back(msg);
    };
    check(tc.lambda_bc >= 0.0, "train.lambda_bc must be >= 0");
    check(tc.learning_rate > 0.0, "train.learning_rate must be > 0");
    check(tc.batch_size >= 1, "train.batch_size must be >= 1");
    check(tc.warmup_steps >= 0, "train.warmup_steps must be >= 0");
    check(tc.max_steps >= 0, "train.max_steps must be >= 0");
    check(tc.eval_every > 0, "train.eval_every must be > 0");
    check(tc.step_cap >= 1, "train.step_cap must be >= 1");
    check(tc.eval_episodes_per_world >= 1, "train.eval_episodes_per_world must be >= 1");
    check(tc.max_eval_worlds >= 1, "train.max_eval_worlds must be >= 1");
    check(tc.ep_min_hops >= 1, "train.min_hops must be >= 1");
    check(tc.ep_max_hops >= tc.ep_min_hops, "train.max_hops must be >= train.min_hops");
    check(tc.success_radius > 0.0, "train.success_radius must be > 0");
    check(tc.weight_decay >= 0.0, "train.weight_decay must be >= 0");
    check(tc.n_layers_sgca >= 1 && tc.n_layers_sgca <= 4,
          "train.sgca_layers must be within 1..4");
    // component validators catch whatever the field checks above do not
    train::ModelConfig probe = mc;
    probe.grounding.n_layers = std::min(std::max(tc.n_layers_sgca, 1), 4);
    try {
        probe.validate();
    } catch (const std::exception& e) {
        errs.emplace_back(e.what());
    }
    return errs;
}

// ---------------------------------------------------------------------------
// world/split file handling

struct WorldSplits {
    std::map<std::uint64_t, world::NavGraph> by_id;
    std::vector<std::uint64_t> seen_ids;
    std::vector<std::uint64_t> unseen_ids;
    int vocab = 0;
    int view_dim = 0;
};

inline WorldSplits load_world_dir(const std::string& dir) {
    WorldSplits ws;
    auto take = [&](const fs::path& path, std::vector<std::uint64_t>& ids, bool required) {
        if (!fs::exists(path)) {
            require(!required, "missing world file ", path.string());
            return;
        }
        for (auto& g : io::load_worlds(path.string())) {
            require(ws.by_id.count(g.world_id) == 0, "duplicate world id ", g.world_id, " in ",
                    path.string());
            if (ws.vocab == 0) {
                ws.vocab = g.config.landmark_vocab;
                ws.view_dim = g.config.view_dim;
            }
            require(g.config.landmark_vocab == ws.vocab && g.config.view_dim == ws.view_dim,
                    "world ", g.world_id, " disagrees on vocab/view_dim with earlier worlds");
            ids.push_back(g.world_id);
            ws.by_id.emplace(g.world_id, std::move(g));
        }
    };
    take(fs::path(dir) / "worlds_seen.jsonl", ws.seen_ids, true);
    take(fs::path(dir) / "worlds_unseen.jsonl", ws.unseen_ids, false);
    require(!ws.seen_ids.empty(), "no worlds in ", dir, "/worlds_seen.jsonl");
    return ws;
}

/// Loads a checkpoint directory into a freshly registered store. The manifest
/// hash is recomputed and compared before any tensor is interpreted.
inline train::ModelConfig load_checkpoint_model(const std::string& ckpt_dir,
                                                nn::ParamStore& store,
                                                nlohmann::json* run_config_out = nullptr) {
    std::ifstream mf(fs::path(ckpt_dir) / "manifest.json");
    if (!mf) throw IoError("cannot open " + ckpt_dir + "/manifest.json");
    nlohmann::json manifest;
    try {
        mf >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("checkpoint manifest: ") + e.what());
    }
    const nlohmann::json& conf = manifest.at("config");
    require(ckpt::config_hash(conf) == manifest.at("config_hash").get<std::string>(),
            "checkpoint config hash mismatch in ", ckpt_dir,
            " (manifest config does not match its recorded hash)");
    train::ModelConfig mc = train::model_config_from_json(conf.at("model"));
    train::register_model(store, mc);
    ckpt::load_checkpoint(ckpt_dir, store);
    if (run_config_out) *run_config_out = conf;
    return mc;
}

// ---------------------------------------------------------------------------
// subcommands

inline void cmd_generate_world(RunContext& rc, bool force) {
    const std::uint64_t seed = static_cast<std::uint64_t>(config::get_int(rc.resolved, "seed", 1));
    const int count = static_cast<int>(config::get_int(rc.resolved, "world.count", 200));
    const int unseen = static_cast<int>(config::get_int(rc.resolved, "world.unseen", 50));
    const int nodes_min = static_cast<int>(config::get_int(rc.resolved, "world.nodes_min", 8));
    const int nodes_max = static_cast<int>(config::get_int(rc.resolved, "world.nodes_max", 12));
    const int eps_per_world =
        static_cast<int>(config::get_int(rc.resolved, "world.episodes_per_world", 2));
    const int min_hops = static_cast<int>(config::get_int(rc.resolved, "train.min_hops", 3));
    const int max_hops = static_cast<int>(config::get_int(rc.resolved, "train.max_hops", 7));
    const double radius = config::get_double(rc.resolved, "train.success_radius", 3.0);
    require(count >= 1, "world.count must be >= 1");
    require(unseen >= 0, "world.unseen must be >= 0");
    require(nodes_min >= 6 && nodes_max >= nodes_min, "bad world.nodes_min/nodes_max");
    require(eps_per_world >= 0, "world.episodes_per_world must be >= 0");

    const fs::path w_seen = rc.out_dir / "worlds_seen.jsonl";
    const fs::path w_unseen = rc.out_dir / "worlds_unseen.jsonl";
    const fs::path e_seen = rc.out_dir / "episodes_seen.jsonl";
    const fs::path e_unseen = rc.out_dir / "episodes_unseen.jsonl";
    rc.declare(w_seen);
    rc.declare(w_unseen);
    rc.declare(e_seen);
    rc.declare(e_unseen);
    begin_run(rc, force);

    // ids partition: seen 1..count, unseen count+1..count+unseen
    auto make_split = [&](std::uint64_t first_id, int n) {
        std::vector<world::NavGraph> worlds;
        std::vector<world::Episode> episodes;
        for (int k = 0; k < n; ++k) {
            const std::uint64_t id = first_id + static_cast<std::uint64_t>(k);
            Rng size_rng(derive_seed(seed, "world-size", id));
            const int nodes =
                static_cast<int>(size_rng.uniform_int(nodes_min, nodes_max));
            world::WorldConfig wc = world_config_from(rc.resolved, nodes);
            wc.validate();
            // a draw can be infeasible (landmark coloring) or admit no episode
            // within the hop bounds; both are retried on fresh entropy
            bool placed = false;
            for (std::uint64_t attempt = 0; attempt < 100 && !placed; ++attempt) {
                world::NavGraph g;
                try {
                    g = world::generate_world(wc, derive_seed(seed, "world", id * 1000 + attempt));
                } catch (const std::exception&) {
                    continue;
                }
                g.world_id = id;
                auto plan = train::detail::plan_episodes(g, min_hops, max_hops);
                if (plan.pairs.empty()) continue;
                for (int j = 0; j < eps_per_world; ++j) {
                    const std::uint64_t es = derive_seed(seed, "gen-ep", id * 1000 +
                                                                             static_cast<std::uint64_t>(j));
                    episodes.push_back(train::detail::make_episode(plan, radius, es, es));
                }
                worlds.push_back(std::move(g));
                placed = true;
            }
            require(placed, "generate-world: no feasible world for id ", id,
                    " after 100 attempts (config too tight)");
        }
        return std::pair{worlds, episodes};
    };
    auto [seen_worlds, seen_eps] = make_split(1, count);
    auto [unseen_worlds, unseen_eps] = make_split(static_cast<std::uint64_t>(count) + 1, unseen);

    io::save_worlds(w_seen.string(), seen_worlds);
    io::save_worlds(w_unseen.string(), unseen_worlds);
    io::save_episodes(e_seen.string(), seen_eps);
    io::save_episodes(e_unseen.string(), unseen_eps);
    finish_run(rc);
}

inline void cmd_train(RunContext& rc, const std::string& worlds_dir, bool force,
                      std::ostream& out) {
    rc.inputs.push_back(worlds_dir);
    WorldSplits ws = load_world_dir(worlds_dir);
    train::ModelConfig mc = model_config_from(rc.resolved, ws.vocab, ws.view_dim);
    train::TrainConfig tc = train_config_from(rc.resolved, rc.out_dir.string());

    const std::vector<std::string> errs = validate_train_setup(tc, mc);
    if (!errs.empty()) {
        std::string joined = "invalid configuration (" + std::to_string(errs.size()) +
                             (errs.size() == 1 ? " problem):" : " problems):");
        for (const auto& e : errs) joined += "\n  - " + e;
        fail(joined);
    }

    rc.declare(rc.out_dir / "train_log.jsonl");
    rc.declare(rc.out_dir / "eval_final.json");
    begin_run(rc, force);

    train::TrainResult res = train::train(tc, mc, ws.by_id, ws.seen_ids, ws.unseen_ids);

    require(!res.log.evals.empty(), "train finished without an evaluation");
    nlohmann::json final_eval = train::eval_log_json(res.log.evals.back());
    final_eval["best_step"] = res.log.best_step;
    final_eval["best_unseen_sr"] = res.log.best_unseen_sr;
    std::ofstream f(rc.out_dir / "eval_final.json", std::ios::trunc);
    f << final_eval.dump(2) << "\n";
    require(f.good(), "short write to eval_final.json");
    finish_run(rc);

    out << "trained " << tc.max_steps << " steps (+" << tc.warmup_steps << " warm-up); best step "
        << res.log.best_step << ", best unseen SR " << res.log.best_unseen_sr << "\n";
}

inline void cmd_eval(RunContext& rc, const std::string& ckpt_dir, const std::string& worlds_dir,
                     const std::string& split, bool force, std::ostream& out) {
    rc.inputs.push_back(ckpt_dir);
    rc.inputs.push_back(worlds_dir);
    require(split == "seen" || split == "unseen" || split == "both",
            "eval: --split must be seen|unseen|both, got '", split, "'");
    WorldSplits ws = load_world_dir(worlds_dir);
    nn::ParamStore store(1);
    nlohmann::json run_config;
    train::ModelConfig mc = load_checkpoint_model(ckpt_dir, store, &run_config);

    // evaluation knobs default to the values the checkpoint was trained with,
    // so a bare eval reproduces the in-training reports
    const nlohmann::json& tj = run_config.at("train");
    auto knob = [&](const char* key, const char* train_field) {
        if (rc.given.count(key)) return static_cast<int>(config::get_int(rc.given, key, 0));
        return tj.at(train_field).get<int>();
    };
    const int eps_per_world = knob("eval.episodes_per_world", "eval_episodes_per_world");
    const int max_worlds = knob("eval.max_worlds", "max_eval_worlds");
    const int step_cap = knob("eval.step_cap", "step_cap");
    const int min_hops = knob("eval.min_hops", "ep_min_hops");
    const int max_hops = knob("eval.max_hops", "ep_max_hops");
    const double radius = rc.given.count("eval.success_radius")
                              ? config::get_double(rc.given, "eval.success_radius", 3.0)
                              : tj.at("success_radius").get<double>();
    const std::uint64_t seed = rc.given.count("seed")
                                   ? static_cast<std::uint64_t>(config::get_int(rc.given, "seed", 1))
                                   : tj.at("seed").get<std::uint64_t>();

    std::vector<std::pair<std::string, const std::vector<std::uint64_t>*>> splits;
    if (split == "seen" || split == "both") splits.emplace_back("seen", &ws.seen_ids);
    if (split == "unseen" || split == "both") splits.emplace_back("unseen", &ws.unseen_ids);
    for (auto& [name, ids] : splits)
        require(!ids->empty() || split == "both", "eval: split '", name, "' has no worlds in ",
                worlds_dir);

    std::vector<fs::path> files;
    for (auto& [name, ids] : splits)
        if (!ids->empty()) {
            files.push_back(rc.out_dir / ("metrics_" + name + ".json"));
            rc.declare(files.back());
        }
    begin_run(rc, force);

    std::size_t fi = 0;
    for (auto& [name, ids] : splits) {
        if (ids->empty()) continue;
        const auto episodes = train::eval_episode_set(ws.by_id, *ids, name, seed, eps_per_world,
                                                      max_worlds, min_hops, max_hops, radius);
        require(!episodes.empty(), "eval: no usable episodes for split '", name, "'");
        std::vector<metrics::TrajectoryRecord> recs;
        recs.reserve(episodes.size());
        for (const auto& ep : episodes)
            recs.push_back(train::eval_rollout(store, mc, ws.by_id.at(ep.world_id), ep, step_cap));
        const metrics::MetricsReport rep = metrics::evaluate(ws.by_id, recs, radius);
        std::ofstream f(files[fi], std::ios::trunc);
        f << metrics::report_to_json(rep).dump(2) << "\n";
        require(f.good(), "short write to ", files[fi].string());
        out << name << ": " << rep.count() << " episodes, SR " << rep.sr << ", SPL " << rep.spl
            << ", NE " << rep.ne << "\n";
        ++fi;
    }
    finish_run(rc);
}

inline void cmd_dump_attention(RunContext& rc, const std::string& ckpt_dir,
                               const std::string& worlds_dir, const std::string& split,
                               int episodes, bool force, std::ostream& out) {
    rc.inputs.push_back(ckpt_dir);
    rc.inputs.push_back(worlds_dir);
    require(episodes >= 1, "dump-attention: --episodes must be >= 1");
    require(split == "seen" || split == "unseen", "dump-attention: --split must be seen|unseen");
    WorldSplits ws = load_world_dir(worlds_dir);
    nn::ParamStore store(1);
    nlohmann::json run_config;
    train::ModelConfig mc = load_checkpoint_model(ckpt_dir, store, &run_config);
    require(mc.ablation != train::Ablation::baseline,
            "dump-attention: a baseline checkpoint has no grounding attention");

    const nlohmann::json& tj = run_config.at("train");
    const std::uint64_t seed = rc.given.count("seed")
                                   ? static_cast<std::uint64_t>(config::get_int(rc.given, "seed", 1))
                                   : tj.at("seed").get<std::uint64_t>();
    const int step_cap = tj.at("step_cap").get<int>();
    const double radius = tj.at("success_radius").get<double>();
    const std::vector<std::uint64_t>& ids = split == "seen" ? ws.seen_ids : ws.unseen_ids;
    require(!ids.empty(), "dump-attention: split '", split, "' has no worlds");
    const auto eps = train::eval_episode_set(ws.by_id, ids, split, seed, 1, episodes,
                                             tj.at("ep_min_hops").get<int>(),
                                             tj.at("ep_max_hops").get<int>(), radius);
    require(static_cast<int>(eps.size()) == episodes, "dump-attention: only ",
            eps.size(), " usable worlds for ", episodes, " episodes");

    std::vector<std::string> bases;
    for (int i = 0; i < episodes; ++i) {
        bases.push_back((rc.out_dir / ("attn_ep" + std::to_string(i))).string());
        rc.declare(bases.back() + ".json");
        rc.declare(bases.back() + ".bin");
    }
    begin_run(rc, force);

    for (int i = 0; i < episodes; ++i) {
        const auto& ep = eps[static_cast<std::size_t>(i)];
        std::vector<sgca::AttentionRecord> sink;
        train::eval_rollout(store, mc, ws.by_id.at(ep.world_id), ep, step_cap, &sink);
        require(!sink.empty(), "dump-attention: episode ", ep.episode_id,
                " produced no attention records");
        sgca::write_attention_dump(bases[static_cast<std::size_t>(i)], ep.episode_id,
                                   mc.grounding.n_layers, sink);
        out << "episode " << ep.episode_id << " (world " << ep.world_id << "): " << sink.size()
            << " attention records\n";
    }
    finish_run(rc);
}

inline void cmd_plot(RunContext& rc, const std::string& run_dir, const std::string& attention,
                     bool force, std::ostream& out) {
    rc.inputs.push_back(run_dir);
    // inputs are read before the manifest is written; outputs only after
    std::ifstream log_in(fs::path(run_dir) / "train_log.jsonl");
    if (!log_in) throw IoError("plot: cannot open " + run_dir + "/train_log.jsonl");
    plot::Series bc{"bc", {}, {}}, pid{"pid", {}, {}}, total{"total", {}, {}};
    plot::Series sr_seen{"seen", {}, {}}, sr_unseen{"unseen", {}, {}};
    plot::Series spl_seen{"seen", {}, {}}, spl_unseen{"unseen", {}, {}};
    std::string line;
    while (std::getline(log_in, line)) {
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw IoError(std::string("plot: bad train_log.jsonl line: ") + e.what());
        }
        const std::string kind = j.at("kind").get<std::string>();
        const double step = j.at("step").get<double>();
        if (kind == "step") {
            bc.x.push_back(step);
            bc.y.push_back(j.at("loss_bc").get<double>());
            pid.x.push_back(step);
            pid.y.push_back(j.at("loss_pid").get<double>());
            total.x.push_back(step);
            total.y.push_back(j.at("loss_total").get<double>());
        } else if (kind == "eval") {
            if (j.contains("seen")) {
                const nlohmann::json& agg = j.at("seen").at("aggregate");
                sr_seen.x.push_back(step);
                sr_seen.y.push_back(agg.at("sr").get<double>());
                spl_seen.x.push_back(step);
                spl_seen.y.push_back(agg.at("spl").get<double>());
            }
            if (j.contains("unseen")) {
                const nlohmann::json& agg = j.at("unseen").at("aggregate");
                sr_unseen.x.push_back(step);
                sr_unseen.y.push_back(agg.at("sr").get<double>());
                spl_unseen.x.push_back(step);
                spl_unseen.y.push_back(agg.at("spl").get<double>());
            }
        }
    }
    require(!sr_seen.x.empty() || !sr_unseen.x.empty(), "plot: ", run_dir,
            "/train_log.jsonl holds no eval records");

    std::vector<sgca::AttentionRecord> attn_records;

    if (!attention.empty()) {
        rc.inputs.push_back(attention);
        auto [header, records] = sgca::read_attention_dump(attention);
        attn_records = std::move(records);
        require(header.at("n_layers").get<int>() >= 1, "plot: corrupt attention header");
        require(!attn_records.empty(), "plot: attention dump ", attention, " is empty");
    }

    const fs::path f_loss = rc.out_dir / "loss_curves.svg";
    const fs::path f_sr = rc.out_dir / "sr_curves.svg";
    const fs::path f_spl = rc.out_dir / "spl_curves.svg";
    rc.declare(f_loss);
    rc.declare(f_sr);
    rc.declare(f_spl);
    std::vector<std::pair<fs::path, const sgca::AttentionRecord*>> attn_files;
    int last_step = 0;
    for (const auto& rec : attn_records) last_step = std::max(last_step, rec.step);
    for (const auto& rec : attn_records) {
        // candidate 0 at the first and final decision: 2 * n_layers maps
        if (rec.candidate != 0 || (rec.step != 0 && rec.step != last_step)) continue;
        const fs::path p = rc.out_dir / ("attn_step" + std::to_string(rec.step) + "_layer" +
                                         std::to_string(rec.layer_index) + ".svg");
        attn_files.emplace_back(p, &rec);
        rc.declare(p);
    }
    begin_run(rc, force);

    if (!bc.x.empty())
        plot::write_line_chart(f_loss.string(), "training losses", "step", "loss",
                               {bc, pid, total});
    else  // a warm-up-only run still yields the chart files it can support
        plot::write_line_chart(f_loss.string(), "training losses", "step", "loss",
                               {plot::Series{"total", {0.0}, {0.0}}});
    std::vector<plot::Series> sr_series, spl_series;
    if (!sr_seen.x.empty()) {
        sr_series.push_back(sr_seen);
        spl_series.push_back(spl_seen);
    }
    if (!sr_unseen.x.empty()) {
        sr_series.push_back(sr_unseen);
        spl_series.push_back(spl_unseen);
    }
    plot::write_line_chart(f_sr.string(), "success rate", "step", "SR", sr_series);
    plot::write_line_chart(f_spl.string(), "success weighted by path length", "step", "SPL",
                           spl_series);
    for (const auto& [p, rec] : attn_files)
        plot::write_heatmap(p.string(),
                            "attention, step " + std::to_string(rec->step) + ", layer " +
                                std::to_string(rec->layer_index),
                            rec->matrix, "key token", "state query");
    finish_run(rc);
    out << "wrote " << (3 + attn_files.size()) << " charts to " << rc.out_dir.string() << "\n";
}

// ---------------------------------------------------------------------------
// argument parsing

inline int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"adaptive text dreamer: graph navigation experiments"};
    app.require_subcommand(1);
    app.fallthrough();

    std::string config_path, out_dir;
    bool force = false;
    std::vector<std::string> sets;
    config::Flat flags;  // only explicitly passed values land here
    app.add_option("--config", config_path,
                   "flat key=value config file, or a manifest.json to re-run");
    app.add_option_function<long long>(
        "--seed", [&](long long v) { flags["seed"] = std::to_string(v); }, "master seed");
    app.add_option_function<long long>(
        "--workers",
        [&](long long v) {
            require(v >= 1, "--workers must be >= 1");
            flags["workers"] = std::to_string(v);
        },
        "worker count (this build is single-threaded; values > 1 fall back to 1)");
    app.add_option("--set", sets, "override any config key, e.g. --set train.max_steps=100")
        ->type_name("KEY=VALUE");
    app.add_flag("--force", force, "overwrite existing outputs");
    app.set_help_all_flag("--help-all", "print help for every subcommand");

    auto opt_int = [&](CLI::App* cmd, const std::string& name, const std::string& key,
                       const std::string& desc) {
        cmd->add_option_function<long long>(
            name, [&flags, key](long long v) { flags[key] = std::to_string(v); }, desc);
    };
    auto opt_dbl = [&](CLI::App* cmd, const std::string& name, const std::string& key,
                       const std::string& desc) {
        cmd->add_option_function<double>(
            name, [&flags, key](double v) { flags[key] = fmt_double(v); }, desc);
    };
    auto opt_str = [&](CLI::App* cmd, const std::string& name, const std::string& key,
                       const std::string& desc) {
        cmd->add_option_function<std::string>(
            name, [&flags, key](const std::string& v) { flags[key] = v; }, desc);
    };

    CLI::App* gen = app.add_subcommand("generate-world",
                                       "write synthetic world and episode files for both splits");
    gen->add_option("--out", out_dir, "output directory")->required();
    opt_int(gen, "--count", "world.count", "seen (training) world count");
    opt_int(gen, "--unseen", "world.unseen", "unseen world count");
    opt_int(gen, "--nodes-min", "world.nodes_min", "smallest node count per world");
    opt_int(gen, "--nodes-max", "world.nodes_max", "largest node count per world");
    opt_int(gen, "--vocab", "world.vocab", "landmark vocabulary size");
    opt_int(gen, "--view-dim", "world.view_dim", "view feature width");
    opt_int(gen, "--episodes-per-world", "world.episodes_per_world",
            "fixed episodes written per world");

    std::string worlds_dir;
    CLI::App* trn = app.add_subcommand("train", "train a policy on generated worlds");
    trn->add_option("--out", out_dir, "run directory (logs, checkpoints)")->required();
    trn->add_option("--worlds", worlds_dir, "directory from generate-world")->required();
    opt_str(trn, "--ablate", "train.ablate", "none|se_only|im_only|baseline");
    opt_int(trn, "--max-steps", "train.max_steps", "policy optimization steps");
    opt_int(trn, "--warmup-steps", "train.warmup_steps", "branch warm-up steps");
    opt_int(trn, "--batch-size", "train.batch_size", "episodes per optimizer step");
    opt_dbl(trn, "--lr", "train.learning_rate", "AdamW learning rate");
    opt_dbl(trn, "--weight-decay", "train.weight_decay", "AdamW weight decay");
    opt_dbl(trn, "--lambda", "train.lambda_bc", "behaviour cloning weight in the total loss");
    opt_int(trn, "--sgca-layers", "train.sgca_layers", "grounding stack depth (1..4)");
    opt_int(trn, "--eval-every", "train.eval_every", "evaluation period in steps");
    opt_int(trn, "--step-cap", "train.step_cap", "rollout decision limit");

    std::string ckpt_dir, split = "both";
    CLI::App* ev = app.add_subcommand("eval", "evaluate a checkpoint on world splits");
    ev->add_option("--out", out_dir, "output directory")->required();
    ev->add_option("--ckpt", ckpt_dir, "checkpoint directory")->required();
    ev->add_option("--worlds", worlds_dir, "directory from generate-world")->required();
    ev->add_option("--split", split, "seen|unseen|both (default both)");
    opt_int(ev, "--episodes-per-world", "eval.episodes_per_world", "episodes per world");
    opt_int(ev, "--max-worlds", "eval.max_worlds", "world cap per split");
    opt_int(ev, "--step-cap", "eval.step_cap", "rollout decision limit");

    int dump_episodes = 3;
    std::string dump_split = "unseen";
    CLI::App* dmp = app.add_subcommand("dump-attention",
                                       "export grounding attention matrices for some episodes");
    dmp->add_option("--out", out_dir, "output directory")->required();
    dmp->add_option("--ckpt", ckpt_dir, "checkpoint directory")->required();
    dmp->add_option("--worlds", worlds_dir, "directory from generate-world")->required();
    dmp->add_option("--episodes", dump_episodes, "episode count (default 3)");
    dmp->add_option("--split", dump_split, "seen|unseen (default unseen)");

    std::string run_dir, attention;
    CLI::App* plt = app.add_subcommand("plot", "render SR/SPL/loss curves and attention maps");
    plt->add_option("--run", run_dir, "train run directory holding train_log.jsonl")->required();
    plt->add_option("--out", out_dir, "output directory (default: <run>/plots)");
    plt->add_option("--attention", attention,
                    "attention dump base path (from dump-attention, no extension)");

    try {
        std::vector<std::string> argv_s{"atd"};
        argv_s.insert(argv_s.end(), args.begin(), args.end());
        std::vector<char*> argv;
        argv.reserve(argv_s.size());
        for (auto& a : argv_s) argv.push_back(a.data());
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
        return app.exit(e, out, err);
    }

    RunContext rc;
    try {
        config::Flat given;
        if (!config_path.empty()) given = config::load_file(config_path);
        for (const auto& kv : sets) {
            const std::size_t eq = kv.find('=');
            require(eq != std::string::npos && eq > 0, "--set expects KEY=VALUE, got '", kv, "'");
            given[config::trim(kv.substr(0, eq))] = config::trim(kv.substr(eq + 1));
        }
        given = config::merge(given, flags);
        config::Flat resolved = config::merge(base_defaults(), given);
        if (config::get_int(resolved, "workers", 1) > 1) {
            err << "note: single-threaded build, running with 1 worker\n";
            resolved["workers"] = given["workers"] = "1";
        }
        rc.resolved = resolved;
        rc.given = given;
        if (!config_path.empty()) rc.inputs.push_back(config_path);

        if (plt->parsed() && out_dir.empty()) out_dir = (fs::path(run_dir) / "plots").string();
        rc.out_dir = out_dir;

        if (gen->parsed()) {
            rc.command = "generate-world";
            cmd_generate_world(rc, force);
        } else if (trn->parsed()) {
            rc.command = "train";
            cmd_train(rc, worlds_dir, force, out);
        } else if (ev->parsed()) {
            rc.command = "eval";
            cmd_eval(rc, ckpt_dir, worlds_dir, split, force, out);
        } else if (dmp->parsed()) {
            rc.command = "dump-attention";
            cmd_dump_attention(rc, ckpt_dir, worlds_dir, dump_split, dump_episodes, force, out);
        } else if (plt->parsed()) {
            rc.command = "plot";
            cmd_plot(rc, run_dir, attention, force, out);
        }
    } catch (const std::exception& e) {
        abort_run(rc);
        err << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

}  // namespace atd::cli
