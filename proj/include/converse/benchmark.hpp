#pragma once

#include "converse/config.hpp"

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace converse {

struct Dataset {
    Catalog full;
    CatalogSplit split;

    const Catalog& targets(const std::string& split_name) const;
};

Dataset prepare_dataset(const DataConfig& data);

/// Fresh parameters sized for the catalog, seeded by train.seed.
ParameterSet initial_parameters(const RunConfig& config, const Catalog& catalog);

struct TrainAudit {
    std::int64_t steps = 0;
    std::int64_t updates = 0;
    std::int64_t planned = 0;  // trajectories produced by planning
    std::int64_t planned_on_updates = 0;  // the same, on steps that trained
    std::int64_t ranked = 0;   // trajectories consumed by the listwise loss
    std::int64_t stored = 0;   // experiences added to replay memory
};

struct TrainedModel {
    Checkpoint best;
    double best_valid_sr = -1.0;
    TrainAudit audit;
};

/// Trains for config.train.steps total steps (continuing `resume` when
/// given) and returns the best-validation checkpoint.
TrainedModel train_model(const RunConfig& config, const Dataset& data, std::ostream* metrics = nullptr,
                         const std::optional<std::filesystem::path>& out_dir = std::nullopt,
                         const Checkpoint* resume = nullptr);

/// Policy names: sapient (needs a checkpoint), abs-greedy, max-entropy.
/// Baselines score items with the checkpoint's embeddings, or with fresh
/// parameters when none is given.
std::vector<EpisodeRecord> run_policy(const std::string& policy, const RunConfig& config, const Dataset& data,
                                      const Checkpoint* checkpoint, const Catalog& targets);

bool known_policy(const std::string& name);

struct GridPoint {
    std::string knob;  // "w" or "N"
    double value = 0.0;
    std::uint64_t seed = 0;
    MetricsReport report;
};

/// Trains and evaluates one model per (knob value, seed); the other knob
/// stays at its configured value.
std::vector<GridPoint> sensitivity_grid(const RunConfig& config, const Dataset& data, std::span<const double> ws,
                                        std::span<const int> ns, std::span<const std::uint64_t> seeds);

/// Writes sr_vs_w.tsv and sr_vs_N.tsv (value, mean SR, per-seed SRs).
void write_grid(const std::vector<GridPoint>& points, const std::filesystem::path& dir);

}  // namespace converse
