#include "converse/params.hpp"

#include <json.hpp>

#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

namespace converse {

void ModelDims::validate() const {
    if (d < 1) throw ModelError("d must be positive");
    if (heads < 1 || d % heads != 0) throw ModelError("head count must divide d");
    if (gat_layers < 1 || pos_layers < 1 || neg_layers < 1 || seq_layers < 1) {
        throw ModelError("layer counts must be positive");
    }
    if (max_turns < 1) throw ModelError("max_turns must be positive");
}

void ParameterSet::add(std::string name, ad::Matrix init) {
    if (index_.count(name)) throw ModelError("duplicate parameter " + name);
    index_.emplace(name, entries_.size());
    entries_.push_back({std::move(name), ad::Tensor(std::move(init), true)});
}

const ad::Tensor& ParameterSet::operator[](std::string_view name) const {
    auto it = index_.find(std::string(name));
    if (it == index_.end()) throw ModelError("unknown parameter " + std::string(name));
    return entries_[it->second].tensor;
}

ad::Tensor& ParameterSet::operator[](std::string_view name) {
    auto it = index_.find(std::string(name));
    if (it == index_.end()) throw ModelError("unknown parameter " + std::string(name));
    return entries_[it->second].tensor;
}

bool ParameterSet::contains(std::string_view name) const { return index_.count(std::string(name)) != 0; }

std::size_t ParameterSet::scalar_count() const {
    std::size_t n = 0;
    for (const Entry& e : entries_) n += static_cast<std::size_t>(e.tensor.value().size());
    return n;
}

ParameterSet ParameterSet::clone() const {
    ParameterSet out;
    for (const Entry& e : entries_) out.add(e.name, e.tensor.value());
    return out;
}

void ParameterSet::copy_values_from(const ParameterSet& other) {
    if (other.entries_.size() != entries_.size()) throw ModelError("parameter sets differ in size");
    for (std::size_t i = 0; i < entries_.size(); ++i) {
        const Entry& src = other.entries_[i];
        Entry& dst = entries_[i];
        if (src.name != dst.name || src.tensor.rows() != dst.tensor.rows() || src.tensor.cols() != dst.tensor.cols()) {
            throw ModelError("parameter mismatch at " + dst.name);
        }
        dst.tensor.mutable_value() = src.tensor.value();
    }
}

void ParameterSet::zero_grad() {
    for (Entry& e : entries_) e.tensor.zero_grad();
}

namespace {

ad::Matrix uniform(ad::Index rows, ad::Index cols, double bound, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> dist(-bound, bound);
    ad::Matrix m(rows, cols);
    for (ad::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
    return m;
}

ad::Matrix xavier(ad::Index in, ad::Index out, std::mt19937_64& rng) {
    return uniform(in, out, std::sqrt(6.0 / static_cast<double>(in + out)), rng);
}

ad::Matrix zeros(ad::Index rows, ad::Index cols) { return ad::Matrix::Zero(rows, cols); }
ad::Matrix ones(ad::Index rows, ad::Index cols) { return ad::Matrix::Ones(rows, cols); }

}  // namespace

ParameterSet init_parameters(const ModelDims& dims, int n_users, int n_items, int n_values, std::uint64_t seed) {
    dims.validate();
    std::mt19937_64 rng(seed);
    const ad::Index d = dims.d;
    const double emb = 1.0 / std::sqrt(static_cast<double>(d));
    ParameterSet p;
    p.add("emb.user", uniform(n_users, d, emb, rng));
    p.add("emb.item", uniform(n_items, d, emb, rng));
    p.add("emb.value", uniform(n_values, d, emb, rng));
    for (int l = 0; l < dims.gat_layers; ++l) {
        const std::string pre = "gat." + std::to_string(l) + ".";
        p.add(pre + "w1", xavier(d, d, rng));
        p.add(pre + "w2", xavier(d, d, rng));
        p.add(pre + "a", uniform(d, 1, std::sqrt(6.0 / (dims.head_dim() + 1.0)), rng));
    }
    for (int l = 0; l < dims.pos_layers; ++l) p.add("gcn_pos." + std::to_string(l) + ".w", xavier(d, d, rng));
    for (int l = 0; l < dims.neg_layers; ++l) p.add("gcn_neg." + std::to_string(l) + ".w", xavier(d, d, rng));
    p.add("agg.w_acc", xavier(d, d, rng));
    p.add("agg.b_acc", zeros(1, d));
    p.add("agg.w_rej", xavier(d, d, rng));
    p.add("agg.b_rej", zeros(1, d));
    p.add("gate.w1", xavier(d, d, rng));
    p.add("gate.w2", xavier(d, d, rng));
    p.add("gate.b", zeros(1, d));
    p.add("seq.pos", uniform(dims.max_turns + 1, d, emb, rng));
    for (int l = 0; l < dims.seq_layers; ++l) {
        const std::string pre = "seq." + std::to_string(l) + ".";
        p.add(pre + "wq", xavier(d, d, rng));
        p.add(pre + "wk", xavier(d, d, rng));
        p.add(pre + "wv", xavier(d, d, rng));
        p.add(pre + "wo", xavier(d, d, rng));
        p.add(pre + "bo", zeros(1, d));
        p.add(pre + "ln1_g", ones(1, d));
        p.add(pre + "ln1_b", zeros(1, d));
        p.add(pre + "ff1_w", xavier(d, 2 * d, rng));
        p.add(pre + "ff1_b", zeros(1, 2 * d));
        p.add(pre + "ff2_w", xavier(2 * d, d, rng));
        p.add(pre + "ff2_b", zeros(1, d));
        p.add(pre + "ln2_g", ones(1, d));
        p.add(pre + "ln2_b", zeros(1, d));
    }
    p.add("policy.w1", xavier(d, d, rng));
    p.add("policy.b1", zeros(1, d));
    p.add("policy.w2", xavier(d, 2, rng));
    p.add("policy.b2", zeros(1, 2));
    p.add("qa.w1", xavier(2 * d, d, rng));
    p.add("qa.b1", zeros(1, d));
    p.add("qa.w2", xavier(d, 1, rng));
    p.add("qa.b2", zeros(1, 1));
    p.add("qv.w1", xavier(d, d, rng));
    p.add("qv.b1", zeros(1, d));
    p.add("qv.w2", xavier(d, 1, rng));
    p.add("qv.b2", zeros(1, 1));
    return p;
}

void Adam::step(ParameterSet& params) {
    ++t_;
    const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
    for (auto& e : params.entries()) {
        ad::Tensor& w = e.tensor;
        if (!w.has_grad()) continue;
        ad::Matrix& m = m_.try_emplace(e.name, ad::Matrix::Zero(w.rows(), w.cols())).first->second;
        ad::Matrix& v = v_.try_emplace(e.name, ad::Matrix::Zero(w.rows(), w.cols())).first->second;
        const ad::Matrix& g = w.grad();
        m = config_.beta1 * m + (1.0 - config_.beta1) * g;
        v = config_.beta2 * v + (1.0 - config_.beta2) * g.cwiseProduct(g);
        w.mutable_value().array() -=
            config_.lr * (m.array() / c1) / ((v.array() / c2).sqrt() + config_.eps);
    }
}

namespace {

constexpr std::array<char, 8> kMagic = {'C', 'V', 'M', 'C', 'K', 'P', 'T', '\0'};

void put_u32(std::ostream& out, std::uint32_t x) {
    const char b[4] = {static_cast<char>(x & 0xff), static_cast<char>((x >> 8) & 0xff),
                       static_cast<char>((x >> 16) & 0xff), static_cast<char>((x >> 24) & 0xff)};
    out.write(b, 4);
}

std::uint32_t get_u32(std::istream& in) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in) throw ModelError("truncated checkpoint");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

struct Blob {
    std::string name;
    const ad::Matrix* m;
};

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
    std::vector<Blob> blobs;
    for (const auto& e : ckpt.params.entries()) blobs.push_back({e.name, &e.tensor.value()});
    for (const auto& e : ckpt.target.entries()) blobs.push_back({"target/" + e.name, &e.tensor.value()});
    for (const auto& e : ckpt.params.entries()) {
        auto m = ckpt.adam_m.find(e.name);
        auto v = ckpt.adam_v.find(e.name);
        if (m != ckpt.adam_m.end()) blobs.push_back({"adam.m/" + e.name, &m->second});
        if (v != ckpt.adam_v.end()) blobs.push_back({"adam.v/" + e.name, &v->second});
    }

    nlohmann::ordered_json manifest;
    manifest["d"] = ckpt.dims.d;
    manifest["K"] = ckpt.dims.heads;
    manifest["L_g"] = ckpt.dims.gat_layers;
    manifest["L_a"] = ckpt.dims.pos_layers;
    manifest["L_n"] = ckpt.dims.neg_layers;
    manifest["seq_layers"] = ckpt.dims.seq_layers;
    manifest["max_turns"] = ckpt.dims.max_turns;
    manifest["catalog_fingerprint"] = ckpt.catalog_fingerprint;
    manifest["step"] = ckpt.step;
    manifest["mode"] = ckpt.mode;
    manifest["adam_steps"] = ckpt.adam_steps;
    auto& table = manifest["tensors"] = nlohmann::ordered_json::array();
    for (const Blob& b : blobs) table.push_back({{"name", b.name}, {"shape", {b.m->rows(), b.m->cols()}}});
    const std::string text = manifest.dump();

    std::ofstream out(path, std::ios::binary);
    if (!out) throw ModelError("cannot write " + path.string());
    out.write(kMagic.data(), kMagic.size());
    put_u32(out, static_cast<std::uint32_t>(text.size()));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const Blob& b : blobs) {
        for (ad::Index i = 0; i < b.m->size(); ++i) put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(b.m->data()[i])));
    }
    if (!out) throw ModelError("failed writing " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ModelError("cannot open checkpoint " + path.string());
    std::array<char, 8> magic{};
    in.read(magic.data(), magic.size());
    if (!in || magic != kMagic) throw ModelError(path.string() + " is not a checkpoint");
    const std::uint32_t len = get_u32(in);
    std::string text(len, '\0');
    in.read(text.data(), len);
    if (!in) throw ModelError("truncated checkpoint manifest");

    Checkpoint ckpt;
    try {
        const auto manifest = nlohmann::json::parse(text);
        ckpt.dims.d = manifest.at("d");
        ckpt.dims.heads = manifest.at("K");
        ckpt.dims.gat_layers = manifest.at("L_g");
        ckpt.dims.pos_layers = manifest.at("L_a");
        ckpt.dims.neg_layers = manifest.at("L_n");
        ckpt.dims.seq_layers = manifest.at("seq_layers");
        ckpt.dims.max_turns = manifest.at("max_turns");
        ckpt.catalog_fingerprint = manifest.at("catalog_fingerprint");
        ckpt.step = manifest.at("step");
        ckpt.mode = manifest.value("mode", "");
        ckpt.adam_steps = manifest.value("adam_steps", 0);
        for (const auto& t : manifest.at("tensors")) {
            const std::string name = t.at("name");
            const ad::Index rows = t.at("shape").at(0);
            const ad::Index cols = t.at("shape").at(1);
            ad::Matrix m(rows, cols);
            for (ad::Index i = 0; i < m.size(); ++i) m.data()[i] = std::bit_cast<float>(get_u32(in));
            if (name.rfind("target/", 0) == 0) ckpt.target.add(name.substr(7), std::move(m));
            else if (name.rfind("adam.m/", 0) == 0) ckpt.adam_m.emplace(name.substr(7), std::move(m));
            else if (name.rfind("adam.v/", 0) == 0) ckpt.adam_v.emplace(name.substr(7), std::move(m));
            else ckpt.params.add(name, std::move(m));
        }
    } catch (const nlohmann::json::exception& e) {
        throw ModelError(std::string("bad checkpoint manifest: ") + e.what());
    }
    ckpt.dims.validate();
    return ckpt;
}

}  // namespace converse
