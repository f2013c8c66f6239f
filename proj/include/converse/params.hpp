#pragma once

#include "converse/autodiff.hpp"

#include <cstdint>
#include <filesystem>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace converse {

class ModelError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct ModelDims {
    int d = 64;
    int heads = 4;       // K
    int gat_layers = 2;  // L_g
    int pos_layers = 1;  // L_a
    int neg_layers = 1;  // L_n
    int seq_layers = 2;
    int max_turns = 15;  // positional table has max_turns + 1 rows

    int head_dim() const { return d / heads; }
    void validate() const;
    friend bool operator==(const ModelDims&, const ModelDims&) = default;
};

/// Named trainable tensors in insertion order.
class ParameterSet {
public:
    struct Entry {
        std::string name;
        ad::Tensor tensor;
    };

    void add(std::string name, ad::Matrix init);
    const ad::Tensor& operator[](std::string_view name) const;
    ad::Tensor& operator[](std::string_view name);
    bool contains(std::string_view name) const;
    const std::vector<Entry>& entries() const { return entries_; }
    std::vector<Entry>& entries() { return entries_; }
    std::size_t scalar_count() const;

    /// Independent copy with the same names and values.
    ParameterSet clone() const;
    /// Overwrites values from `other`, which must have identical names and shapes.
    void copy_values_from(const ParameterSet& other);
    void zero_grad();

private:
    std::vector<Entry> entries_;
    std::unordered_map<std::string, std::size_t> index_;
};

/// Creates every model tensor. Embeddings are uniform in (-1/sqrt(d), 1/sqrt(d));
/// weight matrices use Xavier-uniform; biases start at zero.
ParameterSet init_parameters(const ModelDims& dims, int n_users, int n_items, int n_values, std::uint64_t seed);

struct AdamConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

class Adam {
public:
    explicit Adam(AdamConfig config = {}) : config_(config) {}

    /// Applies one update to every parameter that received a gradient.
    void step(ParameterSet& params);

    std::int64_t steps() const { return t_; }
    const AdamConfig& config() const { return config_; }
    void set_lr(double lr) { config_.lr = lr; }

    std::unordered_map<std::string, ad::Matrix>& first_moment() { return m_; }
    std::unordered_map<std::string, ad::Matrix>& second_moment() { return v_; }
    const std::unordered_map<std::string, ad::Matrix>& first_moment() const { return m_; }
    const std::unordered_map<std::string, ad::Matrix>& second_moment() const { return v_; }
    void set_steps(std::int64_t t) { t_ = t; }

private:
    AdamConfig config_;
    std::int64_t t_ = 0;
    std::unordered_map<std::string, ad::Matrix> m_;
    std::unordered_map<std::string, ad::Matrix> v_;
};

struct Checkpoint {
    ModelDims dims;
    std::uint64_t catalog_fingerprint = 0;
    std::int64_t step = 0;
    std::string mode;
    ParameterSet params;
    ParameterSet target;  // may be empty
    std::int64_t adam_steps = 0;
    std::unordered_map<std::string, ad::Matrix> adam_m;
    std::unordered_map<std::string, ad::Matrix> adam_v;
};

/// Layout: "CVMCKPT\0", u32 manifest length, JSON manifest, then every tensor
/// as row-major little-endian float32 in manifest order.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace converse
