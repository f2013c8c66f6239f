#include "converse/catalog.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <map>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>

namespace converse {

namespace {

template <class T>
void sort_unique(std::vector<T>& v) {
    std::sort(v.begin(), v.end());
    v.erase(std::unique(v.begin(), v.end()), v.end());
}

}  // namespace

Catalog::Catalog(std::vector<std::string> type_names, std::vector<std::string> value_names,
                 std::vector<TypeId> value_type, std::vector<std::vector<ValueId>> item_values,
                 std::vector<std::vector<ItemId>> interactions)
    : type_names_(std::move(type_names)),
      value_names_(std::move(value_names)),
      value_type_(std::move(value_type)),
      item_values_(std::move(item_values)),
      interactions_(std::move(interactions)) {
    if (value_names_.size() != value_type_.size()) throw CatalogError("value names and types differ in length");
    for (std::size_t p = 0; p < value_type_.size(); ++p) {
        if (value_type_[p] < 0 || value_type_[p] >= num_types()) {
            throw CatalogError("value " + std::to_string(p) + " has unknown type " + std::to_string(value_type_[p]));
        }
    }
    for (std::size_t v = 0; v < item_values_.size(); ++v) {
        sort_unique(item_values_[v]);
        for (ValueId p : item_values_[v]) {
            if (p < 0 || p >= num_values()) {
                throw CatalogError("item " + std::to_string(v) + " references unknown value " + std::to_string(p));
            }
        }
    }
    for (std::size_t u = 0; u < interactions_.size(); ++u) {
        sort_unique(interactions_[u]);
        for (ItemId v : interactions_[u]) {
            if (v < 0 || v >= num_items()) {
                throw CatalogError("user " + std::to_string(u) + " references unknown item " + std::to_string(v));
            }
        }
    }
    derive();
}

void Catalog::derive() {
    item_types_.assign(item_values_.size(), {});
    value_items_.assign(value_type_.size(), {});
    type_values_.assign(type_names_.size(), {});
    single_valued_.assign(type_names_.size(), 1);
    for (std::size_t p = 0; p < value_type_.size(); ++p) type_values_[value_type_[p]].push_back(static_cast<ValueId>(p));
    for (std::size_t v = 0; v < item_values_.size(); ++v) {
        std::vector<TypeId> types;
        for (ValueId p : item_values_[v]) {
            types.push_back(value_type_[p]);
            value_items_[p].push_back(static_cast<ItemId>(v));
        }
        std::sort(types.begin(), types.end());
        for (std::size_t k = 1; k < types.size(); ++k) {
            if (types[k] == types[k - 1]) single_valued_[types[k]] = 0;
        }
        types.erase(std::unique(types.begin(), types.end()), types.end());
        item_types_[v] = std::move(types);
    }
}

bool Catalog::item_has_value(ItemId v, ValueId p) const {
    const auto& values = item_values_.at(v);
    return std::binary_search(values.begin(), values.end(), p);
}

std::size_t Catalog::num_interactions() const {
    std::size_t total = 0;
    for (const auto& items : interactions_) total += items.size();
    return total;
}

Catalog Catalog::with_interactions(std::vector<std::vector<ItemId>> interactions) const {
    return Catalog(type_names_, value_names_, value_type_, item_values_, std::move(interactions));
}

std::uint64_t Catalog::fingerprint() const {
    std::ostringstream os;
    write_catalog(*this, os);
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : os.str()) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

bool operator==(const Catalog& a, const Catalog& b) {
    return a.type_names_ == b.type_names_ && a.value_names_ == b.value_names_ && a.value_type_ == b.value_type_ &&
           a.item_values_ == b.item_values_ && a.interactions_ == b.interactions_;
}

// ---------------------------------------------------------------------------
// file format

namespace {

enum class Section { None, Types, Values, Items, Interactions };

[[noreturn]] void fail_at(std::size_t line, const std::string& what) {
    throw CatalogError("line " + std::to_string(line) + ": " + what);
}

std::int64_t parse_id(std::string_view s, std::size_t line) {
    std::int64_t v = -1;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size() || v < 0) {
        fail_at(line, "expected a non-negative integer id, got '" + std::string(s) + "'");
    }
    return v;
}

std::vector<std::string_view> split(std::string_view s, char sep) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    while (true) {
        const std::size_t at = s.find(sep, start);
        out.push_back(s.substr(start, at == std::string_view::npos ? std::string_view::npos : at - start));
        if (at == std::string_view::npos) break;
        start = at + 1;
    }
    return out;
}

std::vector<std::int64_t> parse_id_list(std::string_view s, std::size_t line) {
    std::vector<std::int64_t> out;
    if (s.empty()) return out;
    for (std::string_view part : split(s, ',')) out.push_back(parse_id(part, line));
    return out;
}

template <class T>
void place(std::map<std::int64_t, T>& table, std::int64_t id, T value, std::size_t line, const char* what) {
    if (!table.emplace(id, std::move(value)).second) {
        fail_at(line, std::string("duplicate ") + what + " id " + std::to_string(id));
    }
}

template <class T>
std::vector<T> densify(std::map<std::int64_t, T>& table, const char* what) {
    std::vector<T> out;
    out.reserve(table.size());
    std::int64_t expect = 0;
    for (auto& [id, value] : table) {
        if (id != expect) {
            throw CatalogError(std::string(what) + " ids must be dense from 0; missing id " + std::to_string(expect));
        }
        out.push_back(std::move(value));
        ++expect;
    }
    return out;
}

}  // namespace

Catalog parse_catalog(std::istream& in) {
    std::map<std::int64_t, std::string> types;
    std::map<std::int64_t, std::pair<std::int64_t, std::string>> values;
    std::map<std::int64_t, std::vector<std::int64_t>> items;
    std::map<std::int64_t, std::vector<std::int64_t>> users;
    std::map<std::int64_t, std::size_t> value_line;
    std::map<std::int64_t, std::size_t> item_line;
    std::map<std::int64_t, std::size_t> user_line;

    Section section = Section::None;
    std::string raw;
    std::size_t line = 0;
    while (std::getline(in, raw)) {
        ++line;
        if (!raw.empty() && raw.back() == '\r') raw.pop_back();
        if (raw.empty() || raw.front() == ';') continue;
        if (raw.front() == '#') {
            if (raw == "#types") section = Section::Types;
            else if (raw == "#values") section = Section::Values;
            else if (raw == "#items") section = Section::Items;
            else if (raw == "#interactions") section = Section::Interactions;
            else fail_at(line, "unknown section header '" + raw + "'");
            continue;
        }
        const auto fields = split(raw, '\t');
        switch (section) {
            case Section::None:
                fail_at(line, "record before any section header");
            case Section::Types:
                if (fields.size() != 2) fail_at(line, "type record needs 2 fields");
                place(types, parse_id(fields[0], line), std::string(fields[1]), line, "type");
                break;
            case Section::Values: {
                if (fields.size() != 3) fail_at(line, "value record needs 3 fields");
                const auto id = parse_id(fields[0], line);
                place(values, id, std::make_pair(parse_id(fields[1], line), std::string(fields[2])), line, "value");
                value_line[id] = line;
                break;
            }
            case Section::Items: {
                if (fields.size() != 2) fail_at(line, "item record needs 2 fields");
                const auto id = parse_id(fields[0], line);
                auto list = parse_id_list(fields[1], line);
                if (list.empty()) fail_at(line, "item " + std::to_string(id) + " has no attribute values");
                place(items, id, std::move(list), line, "item");
                item_line[id] = line;
                break;
            }
            case Section::Interactions: {
                if (fields.size() != 2) fail_at(line, "interaction record needs 2 fields");
                const auto id = parse_id(fields[0], line);
                place(users, id, parse_id_list(fields[1], line), line, "user");
                user_line[id] = line;
                break;
            }
        }
    }

    for (const auto& [id, entry] : values) {
        if (!types.count(entry.first)) {
            fail_at(value_line[id], "value " + std::to_string(id) + " has unknown type " + std::to_string(entry.first));
        }
    }
    for (const auto& [id, list] : items) {
        for (auto p : list) {
            if (!values.count(p)) fail_at(item_line[id], "item " + std::to_string(id) + " references unknown value " + std::to_string(p));
        }
    }
    for (const auto& [id, list] : users) {
        for (auto v : list) {
            if (!items.count(v)) fail_at(user_line[id], "user " + std::to_string(id) + " references unknown item " + std::to_string(v));
        }
    }

    auto type_names = densify(types, "type");
    auto value_entries = densify(values, "value");
    auto item_entries = densify(items, "item");
    auto user_entries = densify(users, "user");

    std::vector<std::string> value_names;
    std::vector<TypeId> value_type;
    for (auto& [type, name] : value_entries) {
        value_type.push_back(static_cast<TypeId>(type));
        value_names.push_back(std::move(name));
    }
    std::vector<std::vector<ValueId>> item_values;
    for (const auto& list : item_entries) item_values.emplace_back(list.begin(), list.end());
    std::vector<std::vector<ItemId>> interactions;
    for (const auto& list : user_entries) interactions.emplace_back(list.begin(), list.end());

    return Catalog(std::move(type_names), std::move(value_names), std::move(value_type), std::move(item_values),
                   std::move(interactions));
}

Catalog load_catalog(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw CatalogError("cannot open catalog file " + path.string());
    return parse_catalog(in);
}

namespace {

template <class T>
void write_list(std::ostream& out, const std::vector<T>& list) {
    for (std::size_t k = 0; k < list.size(); ++k) {
        if (k) out << ',';
        out << list[k];
    }
}

}  // namespace

void write_catalog(const Catalog& catalog, std::ostream& out) {
    out << "#types\n";
    for (TypeId y = 0; y < catalog.num_types(); ++y) out << y << '\t' << catalog.type_name(y) << '\n';
    out << "#values\n";
    for (ValueId p = 0; p < catalog.num_values(); ++p) {
        out << p << '\t' << catalog.value_type(p) << '\t' << catalog.value_name(p) << '\n';
    }
    out << "#items\n";
    for (ItemId v = 0; v < catalog.num_items(); ++v) {
        out << v << '\t';
        write_list(out, catalog.item_values(v));
        out << '\n';
    }
    out << "#interactions\n";
    for (UserId u = 0; u < catalog.num_users(); ++u) {
        out << u << '\t';
        write_list(out, catalog.interactions(u));
        out << '\n';
    }
}

void save_catalog(const Catalog& catalog, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw CatalogError("cannot write catalog file " + path.string());
    write_catalog(catalog, out);
}

// ---------------------------------------------------------------------------
// synthetic generator

Catalog generate_synthetic(const SyntheticSpec& spec) {
    if (spec.n_users < 1 || spec.n_items < 1 || spec.n_types < 1 || spec.n_values_per_type < 1 ||
        spec.values_per_item < 1 || spec.interactions_per_user < 1) {
        throw CatalogError("synthetic spec counts must all be at least 1");
    }
    const int n_values = spec.n_types * spec.n_values_per_type;
    if (spec.values_per_item > n_values) throw CatalogError("values_per_item exceeds the number of attribute values");
    if (spec.interactions_per_user > spec.n_items) throw CatalogError("interactions_per_user exceeds n_items");

    std::mt19937_64 rng(spec.seed);
    auto uniform = [&rng](int n) { return static_cast<int>(std::uniform_int_distribution<int>(0, n - 1)(rng)); };

    std::vector<std::string> type_names;
    std::vector<std::string> value_names;
    std::vector<TypeId> value_type;
    for (int y = 0; y < spec.n_types; ++y) {
        type_names.push_back("attr" + std::to_string(y));
        for (int k = 0; k < spec.n_values_per_type; ++k) {
            value_names.push_back("attr" + std::to_string(y) + ":" + std::to_string(k));
            value_type.push_back(y);
        }
    }

    // one value in each of min(values_per_item, n_types) distinct types, then
    // extra distinct values anywhere
    std::vector<std::vector<ValueId>> item_values(static_cast<std::size_t>(spec.n_items));
    std::vector<int> type_order(static_cast<std::size_t>(spec.n_types));
    for (auto& values : item_values) {
        std::iota(type_order.begin(), type_order.end(), 0);
        const int typed = std::min(spec.values_per_item, spec.n_types);
        for (int k = 0; k < typed; ++k) {
            std::swap(type_order[k], type_order[k + uniform(spec.n_types - k)]);
            values.push_back(type_order[k] * spec.n_values_per_type + uniform(spec.n_values_per_type));
        }
        while (static_cast<int>(values.size()) < spec.values_per_item) {
            const ValueId p = uniform(n_values);
            if (std::find(values.begin(), values.end(), p) == values.end()) values.push_back(p);
        }
        std::sort(values.begin(), values.end());
    }

    std::vector<std::vector<ItemId>> carried(static_cast<std::size_t>(n_values));
    for (int v = 0; v < spec.n_items; ++v) {
        for (ValueId p : item_values[v]) carried[p].push_back(v);
    }
    std::vector<ValueId> anchors;
    for (ValueId p = 0; p < n_values; ++p) {
        if (static_cast<int>(carried[p].size()) >= spec.interactions_per_user) anchors.push_back(p);
    }
    if (anchors.empty()) {
        throw CatalogError("infeasible spec: no attribute value is carried by interactions_per_user items");
    }

    // each user has a latent taste (one value per type) and an anchor value
    // shared by all of its items; items matching the taste are preferred
    std::vector<std::vector<ItemId>> interactions(static_cast<std::size_t>(spec.n_users));
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    for (auto& items : interactions) {
        std::vector<ValueId> taste;
        for (int y = 0; y < spec.n_types; ++y) taste.push_back(y * spec.n_values_per_type + uniform(spec.n_values_per_type));
        const ValueId anchor = anchors[static_cast<std::size_t>(uniform(static_cast<int>(anchors.size())))];
        std::vector<ItemId> pool = carried[anchor];
        std::vector<double> weight;
        for (ItemId v : pool) {
            int matches = 0;
            for (ValueId p : taste) matches += std::binary_search(item_values[v].begin(), item_values[v].end(), p);
            weight.push_back(std::exp(static_cast<double>(matches)));
        }
        while (static_cast<int>(items.size()) < spec.interactions_per_user) {
            const double total = std::accumulate(weight.begin(), weight.end(), 0.0);
            double x = unit(rng) * total;
            std::size_t k = 0;
            for (; k + 1 < pool.size(); ++k) {
                x -= weight[k];
                if (x <= 0.0) break;
            }
            items.push_back(pool[k]);
            pool.erase(pool.begin() + static_cast<std::ptrdiff_t>(k));
            weight.erase(weight.begin() + static_cast<std::ptrdiff_t>(k));
        }
        std::sort(items.begin(), items.end());
    }

    return Catalog(std::move(type_names), std::move(value_names), std::move(value_type), std::move(item_values),
                   std::move(interactions));
}

// ---------------------------------------------------------------------------

GlobalGraph build_global_graph(const Catalog& catalog) {
    GlobalGraph g;
    g.num_users = catalog.num_users();
    g.num_items = catalog.num_items();
    g.num_values = catalog.num_values();
    g.user_neighbours.resize(static_cast<std::size_t>(g.num_users));
    g.value_neighbours.resize(static_cast<std::size_t>(g.num_values));
    g.item_user_neighbours.resize(static_cast<std::size_t>(g.num_items));
    g.item_value_neighbours.resize(static_cast<std::size_t>(g.num_items));
    for (UserId u = 0; u < g.num_users; ++u) {
        for (ItemId v : catalog.interactions(u)) {
            g.user_item_edges.emplace_back(u, v);
            g.user_neighbours[u].push_back(v);
            g.item_user_neighbours[v].push_back(u);
        }
    }
    for (ItemId v = 0; v < g.num_items; ++v) {
        for (ValueId p : catalog.item_values(v)) {
            g.value_item_edges.emplace_back(p, v);
            g.value_neighbours[p].push_back(v);
            g.item_value_neighbours[v].push_back(p);
        }
    }
    for (auto& n : g.value_neighbours) std::sort(n.begin(), n.end());
    return g;
}

CatalogSplit split_interactions(const Catalog& catalog, std::uint64_t seed) {
    const std::size_t total = catalog.num_interactions();
    // round(0.15 * total), half up, in exact integer arithmetic
    const std::size_t held_each = (3 * total + 10) / 20;

    std::vector<std::pair<UserId, ItemId>> eligible;
    for (UserId u = 0; u < catalog.num_users(); ++u) {
        if (catalog.interactions(u).size() < 3) continue;
        for (ItemId v : catalog.interactions(u)) eligible.emplace_back(u, v);
    }
    std::mt19937_64 rng(seed);
    std::shuffle(eligible.begin(), eligible.end(), rng);

    std::vector<std::size_t> remaining(static_cast<std::size_t>(catalog.num_users()));
    for (UserId u = 0; u < catalog.num_users(); ++u) remaining[u] = catalog.interactions(u).size();

    std::vector<std::vector<ItemId>> train(remaining.size()), valid(remaining.size()), test(remaining.size());
    std::size_t n_valid = 0;
    std::size_t n_test = 0;
    for (const auto& [u, v] : eligible) {
        // every eligible user keeps at least one training pair
        if (n_valid < held_each && remaining[u] > 1) {
            valid[u].push_back(v);
            --remaining[u];
            ++n_valid;
        } else if (n_test < held_each && remaining[u] > 1) {
            test[u].push_back(v);
            --remaining[u];
            ++n_test;
        } else {
            train[u].push_back(v);
        }
    }
    for (UserId u = 0; u < catalog.num_users(); ++u) {
        if (catalog.interactions(u).size() < 3) train[u] = catalog.interactions(u);
    }
    return {catalog.with_interactions(std::move(train)), catalog.with_interactions(std::move(valid)),
            catalog.with_interactions(std::move(test))};
}

std::vector<ValueId> shared_values(const Catalog& catalog, const std::vector<ItemId>& items) {
    if (items.empty()) return {};
    std::vector<ValueId> shared = catalog.item_values(items.front());
    for (std::size_t k = 1; k < items.size(); ++k) {
        const auto& next = catalog.item_values(items[k]);
        std::vector<ValueId> keep;
        std::set_intersection(shared.begin(), shared.end(), next.begin(), next.end(), std::back_inserter(keep));
        shared = std::move(keep);
    }
    return shared;
}

}  // namespace converse
