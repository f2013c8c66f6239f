#include "converse/config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <spdlog/fmt/fmt.h>

#include <fstream>
#include <functional>
#include <map>
#include <ostream>
#include <sstream>

namespace converse {

namespace pt = boost::property_tree;

namespace {

template <class T>
T parse_number(const std::string& key, const std::string& text) {
    std::istringstream in(text);
    T value{};
    in >> value;
    if (in.fail() || !(in >> std::ws).eof()) throw ConfigError("bad value for " + key + ": '" + text + "'");
    return value;
}

bool parse_bool(const std::string& key, const std::string& text) {
    if (text == "true" || text == "1" || text == "yes") return true;
    if (text == "false" || text == "0" || text == "no") return false;
    throw ConfigError("bad boolean for " + key + ": '" + text + "'");
}

struct Field {
    std::function<void(const std::string&, const std::string&)> set;
    std::function<std::string()> get;
};

template <class T>
Field number(T& target) {
    return {[&target](const std::string& key, const std::string& text) { target = parse_number<T>(key, text); },
            [&target] { return fmt::format("{}", target); }};
}

Field boolean(bool& target) {
    return {[&target](const std::string& key, const std::string& text) { target = parse_bool(key, text); },
            [&target] { return std::string(target ? "true" : "false"); }};
}

Field text(std::string& target) {
    return {[&target](const std::string&, const std::string& value) { target = value; },
            [&target] { return target; }};
}

// section -> key -> field, in a fixed order for writing
using Schema = std::vector<std::pair<std::string, std::vector<std::pair<std::string, Field>>>>;

Schema schema(RunConfig& c) {
    Field mode{[&c](const std::string& key, const std::string& value) {
                   try {
                       c.train.mode = parse_mode(value);
                   } catch (const std::exception&) {
                       throw ConfigError("bad value for " + key + ": '" + value + "'");
                   }
               },
               [&c] { return std::string(to_string(c.train.mode)); }};
    Field rollout{[&c](const std::string& key, const std::string& value) {
                      if (value == "greedy") c.planner.rollout_mode = SelectMode::Greedy;
                      else if (value == "sampled") c.planner.rollout_mode = SelectMode::Sampled;
                      else throw ConfigError("bad value for " + key + ": '" + value + "'");
                  },
                  [&c] { return std::string(c.planner.rollout_mode == SelectMode::Greedy ? "greedy" : "sampled"); }};
    return {
        {"episode",
         {{"t_max", number(c.episode.t_max)},
          {"k_v", number(c.episode.k_v)},
          {"k_p", number(c.episode.k_p)},
          {"gamma", number(c.episode.gamma)},
          {"r_rec_accept", number(c.episode.rewards.rec_accept)},
          {"r_ask_accept", number(c.episode.rewards.ask_accept)},
          {"r_rec_reject", number(c.episode.rewards.rec_reject)},
          {"r_ask_reject", number(c.episode.rewards.ask_reject)},
          {"r_quit", number(c.episode.rewards.quit)}}},
        {"planner",
         {{"simulations", number(c.planner.simulations)},
          {"w", number(c.planner.w)},
          {"rollout", rollout},
          {"seed", number(c.planner.seed)}}},
        {"train",
         {{"mode", mode},
          {"steps", number(c.train.steps)},
          {"batch", number(c.train.batch)},
          {"lr", number(c.train.lr)},
          {"alpha", number(c.train.alpha)},
          {"beta", number(c.train.beta)},
          {"priority_eps", number(c.train.priority_eps)},
          {"target_sync", number(c.train.target_sync)},
          {"memory", number(c.train.memory)},
          {"eval_every", number(c.train.eval_every)},
          {"valid_episodes", number(c.train.valid_episodes)},
          {"seed", number(c.train.seed)},
          {"log_wall_time", boolean(c.train.log_wall_time)}}},
        {"model",
         {{"d", number(c.model.d)},
          {"heads", number(c.model.heads)},
          {"gat_layers", number(c.model.gat_layers)},
          {"pos_layers", number(c.model.pos_layers)},
          {"neg_layers", number(c.model.neg_layers)},
          {"seq_layers", number(c.model.seq_layers)}}},
        {"data",
         {{"catalog", text(c.data.catalog)},
          {"n_users", number(c.data.synthetic.n_users)},
          {"n_items", number(c.data.synthetic.n_items)},
          {"n_types", number(c.data.synthetic.n_types)},
          {"n_values_per_type", number(c.data.synthetic.n_values_per_type)},
          {"values_per_item", number(c.data.synthetic.values_per_item)},
          {"interactions_per_user", number(c.data.synthetic.interactions_per_user)},
          {"seed", number(c.data.synthetic.seed)},
          {"split_seed", number(c.data.split_seed)}}},
        {"eval",
         {{"episodes_per_user", number(c.eval.run.episodes_per_user)},
          {"seed", number(c.eval.run.seed)},
          {"p_rec", number(c.eval.p_rec)},
          {"split", text(c.eval.split)}}},
        {"service",
         {{"host", text(c.service.host)},
          {"port", number(c.service.port)},
          {"idle_minutes", number(c.service.idle_minutes)},
          {"checkpoints", text(c.service.checkpoints)}}},
    };
}

}  // namespace

void RunConfig::validate() const {
    try {
        episode.validate();
        planner.validate();
        train.validate();
        model.validate();
    } catch (const std::exception& e) {
        throw ConfigError(e.what());
    }
    if (model.max_turns != episode.t_max) throw ConfigError("model.max_turns must equal episode.t_max");
    if (eval.run.episodes_per_user < 1) throw ConfigError("eval.episodes_per_user must be positive");
    if (!(eval.p_rec >= 0.0 && eval.p_rec <= 1.0)) throw ConfigError("eval.p_rec must lie in [0, 1]");
    if (eval.split != "valid" && eval.split != "test") throw ConfigError("eval.split must be valid or test");
    if (service.port < 0 || service.port > 65535) throw ConfigError("service.port out of range");
    if (service.idle_minutes < 1) throw ConfigError("service.idle_minutes must be positive");
}

RunConfig parse_config(std::istream& in, RunConfig base) {
    pt::ptree tree;
    try {
        pt::read_ini(in, tree);
    } catch (const pt::ini_parser_error& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    RunConfig c = std::move(base);
    Schema s = schema(c);
    for (const auto& [section, keys] : tree) {
        if (keys.empty() && !keys.data().empty()) throw ConfigError("config: key '" + section + "' outside a section");
        auto sec = std::find_if(s.begin(), s.end(), [&](const auto& e) { return e.first == section; });
        if (sec == s.end()) throw ConfigError("config: unknown section [" + section + "]");
        for (const auto& [key, node] : keys) {
            auto f = std::find_if(sec->second.begin(), sec->second.end(), [&](const auto& e) { return e.first == key; });
            if (f == sec->second.end()) throw ConfigError("config: unknown key " + section + "." + key);
            f->second.set(section + "." + key, node.data());
        }
    }
    c.model.max_turns = c.episode.t_max;
    c.validate();
    return c;
}

RunConfig load_config(const std::filesystem::path& path, RunConfig base) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path.string());
    return parse_config(in, std::move(base));
}

void write_config(const RunConfig& config, std::ostream& out) {
    RunConfig copy = config;
    for (const auto& [section, keys] : schema(copy)) {
        out << '[' << section << "]\n";
        for (const auto& [key, field] : keys) out << key << " = " << field.get() << '\n';
        out << '\n';
    }
}

Catalog resolve_catalog(const DataConfig& data) {
    if (!data.catalog.empty()) return load_catalog(data.catalog);
    return generate_synthetic(data.synthetic);
}

}  // namespace converse
