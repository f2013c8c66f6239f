#pragma once

#include "converse/catalog.hpp"
#include "converse/env.hpp"
#include "converse/eval.hpp"
#include "converse/params.hpp"
#include "converse/planner.hpp"
#include "converse/training.hpp"

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>

namespace converse {

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct DataConfig {
    std::string catalog;  // path; empty means generate from `synthetic`
    SyntheticSpec synthetic;
    std::uint64_t split_seed = 1;
};

struct EvalSettings {
    EvalConfig run;
    double p_rec = 0.3;
    std::string split = "test";  // valid | test
};

struct ServiceConfig {
    std::string host = "127.0.0.1";
    int port = 8080;
    int idle_minutes = 30;
    std::string checkpoints;  // directory scanned for *.ckpt
};

/// Everything a run needs. Sections in the INI file mirror the members:
/// [episode] [planner] [train] [model] [data] [eval] [service].
struct RunConfig {
    EpisodeConfig episode;
    PlannerConfig planner;
    TrainConfig train;
    ModelDims model;
    DataConfig data;
    EvalSettings eval;
    ServiceConfig service;

    /// Validates every section; model.max_turns is tied to episode.t_max.
    void validate() const;
};

/// Parses INI text on top of `base`; unknown sections or keys are errors.
RunConfig parse_config(std::istream& in, RunConfig base = {});
RunConfig load_config(const std::filesystem::path& path, RunConfig base = {});
/// Writes every key, so the output parses back to the same config.
void write_config(const RunConfig& config, std::ostream& out);

/// The catalog named by `data`: loaded from file or generated.
Catalog resolve_catalog(const DataConfig& data);

}  // namespace converse
