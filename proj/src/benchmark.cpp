#include "converse/benchmark.hpp"

#include <spdlog/spdlog.h>

#include <fstream>
#include <map>

namespace converse {

const Catalog& Dataset::targets(const std::string& split_name) const {
    if (split_name == "train") return split.train;
    if (split_name == "valid") return split.valid;
    if (split_name == "test") return split.test;
    throw std::invalid_argument("unknown split " + split_name);
}

Dataset prepare_dataset(const DataConfig& data) {
    Dataset d{resolve_catalog(data), {}};
    d.split = split_interactions(d.full, data.split_seed);
    return d;
}

ParameterSet initial_parameters(const RunConfig& config, const Catalog& catalog) {
    return init_parameters(config.model, catalog.num_users(), catalog.num_items(), catalog.num_values(),
                           config.train.seed);
}

TrainedModel train_model(const RunConfig& config, const Dataset& data, std::ostream* metrics,
                         const std::optional<std::filesystem::path>& out_dir, const Checkpoint* resume) {
    Trainer trainer(data.split.train, &data.split.valid, config.model, config.episode, config.planner, config.train,
                    initial_parameters(config, data.full));
    if (resume != nullptr) trainer.restore(*resume);
    TrainedModel out;
    trainer.run(metrics, out_dir, [&out](const StepMetrics& m) {
        ++out.audit.steps;
        out.audit.updates += m.trained ? 1 : 0;
        out.audit.planned += static_cast<std::int64_t>(m.planned);
        if (m.trained) out.audit.planned_on_updates += static_cast<std::int64_t>(m.planned);
        out.audit.ranked += static_cast<std::int64_t>(m.ranked);
        out.audit.stored += static_cast<std::int64_t>(m.stored);
    });
    out.best = trainer.best_checkpoint();
    out.best_valid_sr = trainer.best_valid_sr();
    return out;
}

bool known_policy(const std::string& name) {
    return name == "sapient" || name == "abs-greedy" || name == "max-entropy";
}

std::vector<EpisodeRecord> run_policy(const std::string& policy, const RunConfig& config, const Dataset& data,
                                      const Checkpoint* checkpoint, const Catalog& targets) {
    if (!known_policy(policy)) throw std::invalid_argument("unknown policy " + policy);
    if (checkpoint != nullptr && checkpoint->catalog_fingerprint != data.split.train.fingerprint()) {
        throw ModelError("checkpoint was trained on another catalog or split");
    }
    const ParameterSet params = checkpoint ? checkpoint->params.clone() : initial_parameters(config, data.full);
    if (policy == "abs-greedy") {
        AbsGreedyPolicy p(params, config.episode);
        return evaluate_policy(p, targets, config.episode, config.eval.run);
    }
    if (policy == "max-entropy") {
        MaxEntropyPolicy p(data.full, params, config.episode, config.eval.p_rec);
        return evaluate_policy(p, targets, config.episode, config.eval.run);
    }
    if (checkpoint == nullptr) throw std::invalid_argument("policy sapient needs a checkpoint");
    const GraphIndex index = build_graph_index(build_global_graph(data.split.train));
    Agent agent(data.split.train, index, params, checkpoint->dims, config.episode);
    AgentPolicy p(agent);
    return evaluate_policy(p, targets, config.episode, config.eval.run);
}

std::vector<GridPoint> sensitivity_grid(const RunConfig& config, const Dataset& data, std::span<const double> ws,
                                        std::span<const int> ns, std::span<const std::uint64_t> seeds) {
    std::vector<GridPoint> out;
    auto run = [&](const std::string& knob, double value, RunConfig c) {
        for (std::uint64_t seed : seeds) {
            c.train.seed = seed;
            const TrainedModel m = train_model(c, data);
            GridPoint p{knob, value, seed, {}};
            p.report = aggregate(run_policy("sapient", c, data, &m.best, data.targets(c.eval.split)), c.episode);
            spdlog::info("grid {}={} seed {}: SR {:.3f}", knob, value, seed, p.report.sr);
            out.push_back(p);
        }
    };
    for (double w : ws) {
        RunConfig c = config;
        c.planner.w = w;
        run("w", w, c);
    }
    for (int n : ns) {
        RunConfig c = config;
        c.planner.simulations = n;
        run("N", n, c);
    }
    return out;
}

void write_grid(const std::vector<GridPoint>& points, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    for (const char* knob : {"w", "N"}) {
        std::map<double, std::vector<double>> rows;
        for (const auto& p : points) {
            if (p.knob == knob) rows[p.value].push_back(p.report.sr);
        }
        if (rows.empty()) continue;
        std::ofstream out(dir / (std::string("sr_vs_") + knob + ".tsv"));
        out << knob << "\tmean_sr\tper_seed\n";
        for (const auto& [value, srs] : rows) {
            double mean = 0.0;
            for (double s : srs) mean += s;
            mean /= static_cast<double>(srs.size());
            out << value << '\t' << mean << '\t';
            for (std::size_t i = 0; i < srs.size(); ++i) out << (i ? "," : "") << srs[i];
            out << '\n';
        }
    }
}

}  // namespace converse
