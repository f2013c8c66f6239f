#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace converse {

using UserId = std::int32_t;
using ItemId = std::int32_t;
using ValueId = std::int32_t;
using TypeId = std::int32_t;

class CatalogError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// The recommendation universe. Ids are dense per entity class. All
/// per-entity lists are kept sorted ascending.
class Catalog {
public:
    Catalog() = default;
    Catalog(std::vector<std::string> type_names, std::vector<std::string> value_names,
            std::vector<TypeId> value_type, std::vector<std::vector<ValueId>> item_values,
            std::vector<std::vector<ItemId>> interactions);

    int num_users() const { return static_cast<int>(interactions_.size()); }
    int num_items() const { return static_cast<int>(item_values_.size()); }
    int num_types() const { return static_cast<int>(type_names_.size()); }
    int num_values() const { return static_cast<int>(value_type_.size()); }

    const std::string& type_name(TypeId y) const { return type_names_.at(y); }
    const std::string& value_name(ValueId p) const { return value_names_.at(p); }
    TypeId value_type(ValueId p) const { return value_type_.at(p); }

    /// P(v)
    const std::vector<ValueId>& item_values(ItemId v) const { return item_values_.at(v); }
    /// Y(v)
    const std::vector<TypeId>& item_types(ItemId v) const { return item_types_.at(v); }
    /// V(u)
    const std::vector<ItemId>& interactions(UserId u) const { return interactions_.at(u); }
    /// V_p: items carrying value p.
    const std::vector<ItemId>& value_items(ValueId p) const { return value_items_.at(p); }
    /// Values of type y, ascending.
    const std::vector<ValueId>& type_values(TypeId y) const { return type_values_.at(y); }
    /// True when no item carries two values of type y.
    bool single_valued(TypeId y) const { return single_valued_.at(y) != 0; }
    bool item_has_value(ItemId v, ValueId p) const;

    std::size_t num_interactions() const;

    /// Same universe, different interaction lists.
    Catalog with_interactions(std::vector<std::vector<ItemId>> interactions) const;

    /// Stable 64-bit fingerprint of the serialised catalog.
    std::uint64_t fingerprint() const;

    friend bool operator==(const Catalog& a, const Catalog& b);

private:
    void derive();

    std::vector<std::string> type_names_;
    std::vector<std::string> value_names_;
    std::vector<TypeId> value_type_;
    std::vector<std::vector<ValueId>> item_values_;
    std::vector<std::vector<ItemId>> interactions_;

    std::vector<std::vector<TypeId>> item_types_;
    std::vector<std::vector<ItemId>> value_items_;
    std::vector<std::vector<ValueId>> type_values_;
    std::vector<char> single_valued_;
};

/// Tripartite user-item-value graph; nodes live in one shared index space
/// with users first, then items, then values.
struct GlobalGraph {
    int num_users = 0;
    int num_items = 0;
    int num_values = 0;
    std::vector<std::pair<UserId, ItemId>> user_item_edges;
    std::vector<std::pair<ValueId, ItemId>> value_item_edges;

    std::vector<std::vector<ItemId>> user_neighbours;
    std::vector<std::vector<ItemId>> value_neighbours;
    std::vector<std::vector<UserId>> item_user_neighbours;
    std::vector<std::vector<ValueId>> item_value_neighbours;

    int num_nodes() const { return num_users + num_items + num_values; }
    int user_node(UserId u) const { return u; }
    int item_node(ItemId v) const { return num_users + v; }
    int value_node(ValueId p) const { return num_users + num_items + p; }
};

struct SyntheticSpec {
    int n_users = 30;
    int n_items = 100;
    int n_types = 8;
    int n_values_per_type = 4;
    int values_per_item = 8;
    int interactions_per_user = 10;
    std::uint64_t seed = 1;
};

Catalog load_catalog(const std::filesystem::path& path);
Catalog parse_catalog(std::istream& in);
void write_catalog(const Catalog& catalog, std::ostream& out);
void save_catalog(const Catalog& catalog, const std::filesystem::path& path);

Catalog generate_synthetic(const SyntheticSpec& spec);

GlobalGraph build_global_graph(const Catalog& catalog);

struct CatalogSplit {
    Catalog train;
    Catalog valid;
    Catalog test;
};

/// Pair-level 7 : 1.5 : 1.5 split. Users with fewer than three interactions
/// keep all pairs in train.
CatalogSplit split_interactions(const Catalog& catalog, std::uint64_t seed);

/// Values shared by every item in `items` (sorted).
std::vector<ValueId> shared_values(const Catalog& catalog, const std::vector<ItemId>& items);

}  // namespace converse
