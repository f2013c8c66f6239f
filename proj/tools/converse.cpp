#include "converse/benchmark.hpp"
#include "converse/service.hpp"

#include <CLI11.hpp>
#include <httplib.h>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>

namespace fs = std::filesystem;
using namespace converse;

namespace {

struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
};

void add_common(CLI::App* cmd, Common& c, bool out_required) {
    cmd->add_option("--config", c.config, "INI run configuration")->check(CLI::ExistingFile);
    cmd->add_option("--seed", c.seed, "overrides the seeds of the run");
    auto* out = cmd->add_option("--out", c.out, "output path");
    if (out_required) out->required();
}

RunConfig base_config(const Common& c) {
    RunConfig config = c.config.empty() ? RunConfig{} : load_config(c.config);
    if (c.seed) {
        config.train.seed = *c.seed;
        config.eval.run.seed = *c.seed;
    }
    return config;
}

void setup_logging() {
    auto logger = spdlog::stderr_color_mt("converse");
    spdlog::set_default_logger(logger);
    spdlog::set_pattern("[%H:%M:%S] [%^%l%$] %v");
    spdlog::set_level(spdlog::level::info);
    if (const char* level = std::getenv("CONVERSE_MCTS_LOG")) {
        spdlog::set_level(spdlog::level::from_str(level));
    }
}

struct SpecFlags {
    std::optional<int> users, items, types, values_per_type, values_per_item, interactions;
};

int cmd_generate(const Common& c, const SpecFlags& f) {
    SyntheticSpec spec = base_config(c).data.synthetic;
    if (c.seed) spec.seed = *c.seed;
    spec.n_users = f.users.value_or(spec.n_users);
    spec.n_items = f.items.value_or(spec.n_items);
    spec.n_types = f.types.value_or(spec.n_types);
    spec.n_values_per_type = f.values_per_type.value_or(spec.n_values_per_type);
    spec.values_per_item = f.values_per_item.value_or(spec.values_per_item);
    spec.interactions_per_user = f.interactions.value_or(spec.interactions_per_user);
    const Catalog catalog = generate_synthetic(spec);
    save_catalog(catalog, c.out);
    spdlog::info("wrote {} users, {} items, {} values to {}", catalog.num_users(), catalog.num_items(),
                 catalog.num_values(), c.out);
    return 0;
}

int cmd_train(const Common& c, const std::optional<std::string>& mode, const std::optional<int>& steps,
              const std::optional<int>& rollouts, const std::string& resume) {
    RunConfig config = base_config(c);
    if (mode) config.train.mode = parse_mode(*mode);
    if (steps) config.train.steps = *steps;
    if (rollouts) config.planner.simulations = *rollouts;
    config.validate();
    const Dataset data = prepare_dataset(config.data);
    const fs::path out = c.out;
    fs::create_directories(out);
    {
        std::ofstream cfg(out / "config.ini");
        write_config(config, cfg);
    }
    std::optional<Checkpoint> start;
    if (!resume.empty()) {
        start = load_checkpoint(resume);
        spdlog::info("resuming from {} at step {}", resume, start->step);
    }
    std::ofstream metrics(out / "metrics.jsonl", start ? std::ios::app : std::ios::trunc);
    spdlog::info("training {} for {} steps, N={} w={}", to_string(config.train.mode), config.train.steps,
                 config.planner.simulations, config.planner.w);
    const TrainedModel m = train_model(config, data, &metrics, out, start ? &*start : nullptr);
    spdlog::info("done: {} planned trajectories, {} ranked, {} stored; best valid SR {:.3f}", m.audit.planned,
                 m.audit.ranked, m.audit.stored, m.best_valid_sr);
    return 0;
}

int cmd_eval(const Common& c, const std::string& policy, const std::string& checkpoint,
             const std::optional<std::string>& split, const std::string& emit_plots) {
    RunConfig config = base_config(c);
    if (split) config.eval.split = *split;
    config.validate();
    const Dataset data = prepare_dataset(config.data);
    if (!emit_plots.empty()) {
        const double ws[] = {0.0, 0.5, 1.0, 1.5, 2.0};
        const int ns[] = {1, 5, 10, 20};
        const std::uint64_t seeds[] = {config.train.seed, config.train.seed + 1, config.train.seed + 2};
        write_grid(sensitivity_grid(config, data, ws, ns, seeds), emit_plots);
        spdlog::info("wrote grid files to {}", emit_plots);
        return 0;
    }
    std::optional<Checkpoint> ckpt;
    if (!checkpoint.empty()) ckpt = load_checkpoint(checkpoint);
    const auto records = run_policy(policy, config, data, ckpt ? &*ckpt : nullptr, data.targets(config.eval.split));
    const MetricsReport report = aggregate(records, config.episode);
    write_report(report, policy, std::cout);
    if (!c.out.empty()) {
        std::ofstream out(c.out);
        out << report_line(report, policy) << '\n';
        for (const auto& r : records) {
            for (const auto& t : r.trace) out << trace_line(t) << '\n';
        }
    }
    return 0;
}

int cmd_plan(const Common& c, const std::string& checkpoint, UserId user, const std::string& split) {
    RunConfig config = base_config(c);
    config.validate();
    const Dataset data = prepare_dataset(config.data);
    const Catalog& targets = data.targets(split);
    if (user < 0 || user >= targets.num_users()) throw std::invalid_argument("user id out of range");
    const auto& items = targets.interactions(user);
    if (items.empty()) throw std::invalid_argument("user has no interactions in the " + split + " split");

    const Checkpoint ckpt = checkpoint.empty()
                                ? Checkpoint{config.model, data.split.train.fingerprint(), 0, "init",
                                             initial_parameters(config, data.full), {}, 0, {}, {}}
                                : load_checkpoint(checkpoint);
    if (ckpt.catalog_fingerprint != data.split.train.fingerprint()) {
        throw ModelError("checkpoint was trained on another catalog or split");
    }
    const GraphIndex index = build_graph_index(build_global_graph(data.split.train));
    Agent agent(data.split.train, index, ckpt.params, ckpt.dims, config.episode);
    std::mt19937_64 rng(config.train.seed);
    const ConversationState start = init_session(data.full, user, items, rng);
    Simulator sim{data.full, items, config.episode};
    const PlanResult plan = plan_user(start, agent, sim, config.planner);
    if (c.out.empty()) {
        dump_tree(plan, std::cout);
    } else {
        std::ofstream out(c.out);
        dump_tree(plan, out);
    }
    spdlog::info("{} nodes, {} trajectories", plan.node_count, plan.trajectories.size());
    return 0;
}

int cmd_serve(const Common& c, const std::vector<std::string>& checkpoints, const std::optional<std::string>& host,
              const std::optional<int>& port) {
    RunConfig config = base_config(c);
    if (host) config.service.host = *host;
    if (port) config.service.port = *port;
    config.validate();
    const Dataset data = prepare_dataset(config.data);
    SessionManager sessions(config.episode, std::chrono::minutes(config.service.idle_minutes));
    const std::string catalog_id = config.data.catalog.empty() ? "synthetic" : fs::path(config.data.catalog).stem().string();
    sessions.add_catalog(catalog_id, data.full, data.split.train);

    std::vector<fs::path> paths(checkpoints.begin(), checkpoints.end());
    if (!config.service.checkpoints.empty()) {
        for (const auto& e : fs::directory_iterator(config.service.checkpoints)) {
            if (e.path().extension() == ".ckpt") paths.push_back(e.path());
        }
    }
    if (paths.empty()) throw std::invalid_argument("serve needs at least one checkpoint");
    for (const auto& p : paths) {
        sessions.add_checkpoint(p.stem().string(), load_checkpoint(p));
        spdlog::info("loaded checkpoint {}", p.string());
    }

    httplib::Server server;
    register_routes(server, sessions);
    spdlog::info("listening on {}:{}", config.service.host, config.service.port);
    if (!server.listen(config.service.host, config.service.port)) {
        throw std::runtime_error("cannot bind " + config.service.host + ":" + std::to_string(config.service.port));
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    setup_logging();
    CLI::App app{"Conversational recommendation with tree-search self-training"};
    app.require_subcommand(1);

    Common common;

    SpecFlags spec;
    auto* gen = app.add_subcommand("generate", "write a synthetic catalog");
    add_common(gen, common, true);
    gen->add_option("--users", spec.users);
    gen->add_option("--items", spec.items);
    gen->add_option("--types", spec.types);
    gen->add_option("--values-per-type", spec.values_per_type);
    gen->add_option("--values-per-item", spec.values_per_item);
    gen->add_option("--interactions", spec.interactions);

    std::optional<std::string> mode;
    std::optional<int> steps, rollouts;
    std::string resume;
    auto* train = app.add_subcommand("train", "self-train an agent");
    add_common(train, common, true);
    train->add_option("--mode", mode, "sapient or sapient-e")->check(CLI::IsMember({"sapient", "sapient-e"}));
    train->add_option("--steps", steps, "total training steps");
    train->add_option("--rollouts", rollouts, "simulations per planning call");
    train->add_option("--resume", resume, "checkpoint to continue from")->check(CLI::ExistingFile);

    std::string policy = "sapient", checkpoint, emit_plots;
    std::optional<std::string> split;
    auto* eval = app.add_subcommand("eval", "evaluate a policy against the simulated user");
    add_common(eval, common, false);
    eval->add_option("--policy", policy)->check(CLI::IsMember({"sapient", "abs-greedy", "max-entropy"}));
    eval->add_option("--checkpoint", checkpoint)->check(CLI::ExistingFile);
    eval->add_option("--split", split)->check(CLI::IsMember({"valid", "test"}));
    eval->add_option("--emit-plots", emit_plots, "directory for the w/N sensitivity grid");

    UserId user = 0;
    std::string plan_split = "train";
    auto* plan = app.add_subcommand("plan", "dump one planning tree");
    add_common(plan, common, false);
    plan->add_option("--checkpoint", checkpoint)->check(CLI::ExistingFile);
    plan->add_option("--user", user)->required();
    plan->add_option("--split", plan_split)->check(CLI::IsMember({"train", "valid", "test"}));

    std::vector<std::string> serve_ckpts;
    std::optional<std::string> host;
    std::optional<int> port;
    auto* serve = app.add_subcommand("serve", "run the HTTP session API");
    add_common(serve, common, false);
    serve->add_option("--checkpoint", serve_ckpts)->check(CLI::ExistingFile);
    serve->add_option("--host", host);
    serve->add_option("--port", port);

    CLI11_PARSE(app, argc, argv);
    try {
        if (*gen) return cmd_generate(common, spec);
        if (*train) return cmd_train(common, mode, steps, rollouts, resume);
        if (*eval) {
            if (policy == "sapient" && checkpoint.empty() && emit_plots.empty()) {
                throw std::invalid_argument("--policy sapient needs --checkpoint");
            }
            return cmd_eval(common, policy, checkpoint, split, emit_plots);
        }
        if (*plan) return cmd_plan(common, checkpoint, user, plan_split);
        if (*serve) return cmd_serve(common, serve_ckpts, host, port);
    } catch (const std::exception& e) {
        spdlog::error("{}", e.what());
        return 1;
    }
    return 1;
}
