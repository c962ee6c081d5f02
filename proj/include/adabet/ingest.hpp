#pragma once

// Activation/gradient dumps: NPY v1.0 tensors, per-layer metadata, and the
// pooling of several small forward-pass batches into one activation set.

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <random>
#include <regex>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "adabet/error.hpp"
#include "adabet/homology.hpp"
#include "adabet/json_writer.hpp"

namespace adabet {

static_assert(std::endian::native == std::endian::little, "NPY payloads are read as little-endian");

enum class DType { f32, f64 };

inline std::size_t item_size(DType t) { return t == DType::f32 ? 4 : 8; }
inline const char* descr(DType t) { return t == DType::f32 ? "<f4" : "<f8"; }

/// Row-major tensor; axis 0 is the batch axis. f32 payloads are held as
/// doubles (exactly) and written back as f32.
struct Tensor {
    std::vector<std::size_t> shape;
    DType dtype = DType::f64;
    std::vector<double> data;

    Tensor() = default;
    Tensor(std::vector<std::size_t> shape_, DType dtype_, std::vector<double> data_)
        : shape(std::move(shape_)), dtype(dtype_), data(std::move(data_)) {
        require(element_count(shape) == data.size(), "tensor data length does not match its shape");
    }

    static std::size_t element_count(const std::vector<std::size_t>& shape) {
        return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
    }

    std::size_t batch() const { return shape.empty() ? 1 : shape.front(); }
    /// Product of the non-batch dims.
    std::size_t per_sample() const {
        return shape.empty() ? 1 : element_count({shape.begin() + 1, shape.end()});
    }
    std::span<const double> sample(std::size_t n) const { return {data.data() + n * per_sample(), per_sample()}; }

    friend bool operator==(const Tensor&, const Tensor&) = default;
};

// ---------------------------------------------------------------------------
// NPY v1.0

class NpyError : public DataError {
public:
    using DataError::DataError;
};

namespace detail {

inline constexpr char kNpyMagic[] = "\x93NUMPY";

// Parser for the python-literal header dict: {'descr': '<f4', 'fortran_order': False, 'shape': (2, 3), }
class HeaderParser {
public:
    explicit HeaderParser(std::string_view text) : s_(text) {}

    struct Header {
        std::optional<std::string> descr;
        std::optional<bool> fortran_order;
        std::optional<std::vector<std::size_t>> shape;
    };

    Header parse() {
        Header h;
        expect('{');
        for (;;) {
            skip_ws();
            if (peek() == '}') break;
            const std::string key = quoted();
            expect(':');
            skip_ws();
            if (key == "descr")
                h.descr = quoted();
            else if (key == "fortran_order")
                h.fortran_order = boolean();
            else if (key == "shape")
                h.shape = tuple();
            else
                throw NpyError("NPY header: unexpected key '" + key + "'");
            skip_ws();
            if (peek() == ',') ++pos_;
        }
        return h;
    }

private:
    char peek() const {
        if (pos_ >= s_.size()) throw NpyError("NPY header: unexpected end of header dictionary");
        return s_[pos_];
    }
    void skip_ws() {
        while (pos_ < s_.size() && std::isspace(static_cast<unsigned char>(s_[pos_]))) ++pos_;
    }
    void expect(char c) {
        skip_ws();
        if (peek() != c) throw NpyError(std::string("NPY header: expected '") + c + "'");
        ++pos_;
    }
    std::string quoted() {
        skip_ws();
        const char q = peek();
        if (q != '\'' && q != '"') throw NpyError("NPY header: expected a quoted string");
        const auto end = s_.find(q, pos_ + 1);
        if (end == std::string_view::npos) throw NpyError("NPY header: unterminated string");
        std::string out(s_.substr(pos_ + 1, end - pos_ - 1));
        pos_ = end + 1;
        return out;
    }
    bool boolean() {
        if (s_.substr(pos_, 4) == "True") {
            pos_ += 4;
            return true;
        }
        if (s_.substr(pos_, 5) == "False") {
            pos_ += 5;
            return false;
        }
        throw NpyError("NPY header: fortran_order must be True or False");
    }
    std::vector<std::size_t> tuple() {
        expect('(');
        std::vector<std::size_t> dims;
        for (;;) {
            skip_ws();
            if (peek() == ')') {
                ++pos_;
                return dims;
            }
            if (!std::isdigit(static_cast<unsigned char>(peek()))) throw NpyError("NPY header: malformed shape tuple");
            std::size_t v = 0;
            while (pos_ < s_.size() && std::isdigit(static_cast<unsigned char>(s_[pos_])))
                v = v * 10 + static_cast<std::size_t>(s_[pos_++] - '0');
            dims.push_back(v);
            skip_ws();
            if (peek() == ',') ++pos_;
        }
    }

    std::string_view s_;
    std::size_t pos_ = 0;
};

inline std::string shape_repr(const std::vector<std::size_t>& shape) {
    std::string s = "(";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ", ";
        s += std::to_string(shape[i]);
    }
    if (shape.size() == 1) s += ',';
    return s + ")";
}

}  // namespace detail

inline Tensor read_npy(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 10 || std::memcmp(bytes.data(), detail::kNpyMagic, 6) != 0)
        throw NpyError("NPY: bad magic (expected \\x93NUMPY)");
    if (bytes[6] != 1 || bytes[7] != 0)
        throw NpyError("NPY: unsupported format version " + std::to_string(bytes[6]) + "." + std::to_string(bytes[7]) +
                       " (only 1.0)");
    const std::size_t header_len = bytes[8] | (static_cast<std::size_t>(bytes[9]) << 8);
    if (bytes.size() < 10 + header_len) throw NpyError("NPY: truncated header");
    const std::string_view text(reinterpret_cast<const char*>(bytes.data() + 10), header_len);
    const auto h = detail::HeaderParser(text).parse();
    if (!h.descr || !h.fortran_order || !h.shape) throw NpyError("NPY header: missing descr, fortran_order or shape");

    DType dtype;
    if (*h.descr == "<f4")
        dtype = DType::f32;
    else if (*h.descr == "<f8")
        dtype = DType::f64;
    else
        throw NpyError("NPY: unsupported dtype '" + *h.descr + "' (expected <f4 or <f8)");
    if (*h.fortran_order) throw NpyError("NPY: fortran_order=True payloads are not supported");

    const std::size_t count = Tensor::element_count(*h.shape);
    const std::size_t payload = bytes.size() - 10 - header_len;
    if (payload < count * item_size(dtype))
        throw NpyError("NPY: truncated payload (" + std::to_string(payload) + " bytes, expected " +
                       std::to_string(count * item_size(dtype)) + ")");
    if (payload > count * item_size(dtype)) throw NpyError("NPY: unexpected trailing bytes after payload");

    const std::uint8_t* p = bytes.data() + 10 + header_len;
    std::vector<double> data(count);
    for (std::size_t i = 0; i < count; ++i) {
        if (dtype == DType::f32) {
            float v;
            std::memcpy(&v, p + 4 * i, 4);
            data[i] = v;
        } else {
            std::memcpy(&data[i], p + 8 * i, 8);
        }
        if (!std::isfinite(data[i])) throw NpyError("NPY: non-finite value at flat index " + std::to_string(i));
    }
    return Tensor(*h.shape, dtype, std::move(data));
}

inline Tensor read_npy(std::string_view bytes) {
    return read_npy(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(bytes.data()), bytes.size()));
}

/// NPY v1.0 with the header padded by spaces so that the total header size
/// is a multiple of 64 bytes.
inline std::string write_npy(const Tensor& t) {
    std::string dict = std::string("{'descr': '") + descr(t.dtype) +
                       "', 'fortran_order': False, 'shape': " + detail::shape_repr(t.shape) + ", }";
    const std::size_t unpadded = 10 + dict.size() + 1;
    dict.append((64 - unpadded % 64) % 64, ' ');
    dict += '\n';

    std::string out(detail::kNpyMagic, 6);
    out += '\x01';
    out += '\x00';
    out += static_cast<char>(dict.size() & 0xff);
    out += static_cast<char>((dict.size() >> 8) & 0xff);
    out += dict;
    const std::size_t header = out.size();
    out.resize(header + t.data.size() * item_size(t.dtype));
    char* p = out.data() + header;
    for (std::size_t i = 0; i < t.data.size(); ++i) {
        if (t.dtype == DType::f32) {
            const float v = static_cast<float>(t.data[i]);
            std::memcpy(p + 4 * i, &v, 4);
        } else {
            std::memcpy(p + 8 * i, &t.data[i], 8);
        }
    }
    return out;
}

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_file(const std::filesystem::path& path, std::string_view bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

// ---------------------------------------------------------------------------
// Layer metadata

struct LayerMeta {
    std::size_t index = 0;
    std::string name;
    bool trainable = true;
    std::size_t param_count = 0;
    std::size_t act_elems_per_sample = 1;
    std::optional<std::string> group_id;
    /// Within a group, marks the sublayer whose activations represent the group.
    bool group_output = false;

    friend bool operator==(const LayerMeta&, const LayerMeta&) = default;
};

inline std::vector<LayerMeta> load_layer_meta(std::string_view json_text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(json_text);
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("meta.json: ") + e.what());
    }
    require(j.is_array(), "meta.json: expected a JSON array of layer entries");

    std::vector<LayerMeta> metas;
    for (std::size_t k = 0; k < j.size(); ++k) {
        const auto& e = j[k];
        auto need = [&](const char* field) -> const nlohmann::json& {
            if (!e.is_object() || !e.contains(field))
                throw DataError("meta.json: entry " + std::to_string(k) + " is missing required field '" + field + "'");
            return e.at(field);
        };
        try {
            LayerMeta m;
            m.index = need("index").get<std::size_t>();
            m.name = need("name").get<std::string>();
            m.trainable = need("trainable").get<bool>();
            m.param_count = need("param_count").get<std::size_t>();
            m.act_elems_per_sample = need("act_elems_per_sample").get<std::size_t>();
            if (e.contains("group_id") && !e.at("group_id").is_null()) m.group_id = e.at("group_id").get<std::string>();
            if (e.contains("group_output")) m.group_output = e.at("group_output").get<bool>();
            require(m.act_elems_per_sample >= 1,
                    "meta.json: layer " + std::to_string(m.index) + " has act_elems_per_sample 0");
            metas.push_back(std::move(m));
        } catch (const nlohmann::json::exception& ex) {
            throw DataError("meta.json: entry " + std::to_string(k) + ": " + ex.what());
        }
    }

    std::sort(metas.begin(), metas.end(), [](const LayerMeta& a, const LayerMeta& b) { return a.index < b.index; });
    for (std::size_t i = 1; i < metas.size(); ++i)
        if (metas[i].index == metas[i - 1].index)
            throw DataError("meta.json: duplicate layer index " + std::to_string(metas[i].index));
    for (std::size_t i = 0; i < metas.size(); ++i)
        if (metas[i].index != i)
            throw DataError("meta.json: layer indices must be contiguous from 0 (missing index " + std::to_string(i) + ")");
    return metas;
}

inline std::string to_json(const std::vector<LayerMeta>& metas) {
    JsonWriter w;
    w.begin_array();
    for (const auto& m : metas) {
        w.begin_object()
            .field("index", std::uint64_t{m.index})
            .field("name", m.name)
            .field("trainable", m.trainable)
            .field("param_count", std::uint64_t{m.param_count})
            .field("act_elems_per_sample", std::uint64_t{m.act_elems_per_sample})
            .field("group_id", m.group_id)
            .field("group_output", m.group_output)
            .end_object();
    }
    w.end_array();
    return w.str();
}

inline void check_against_dump(const LayerMeta& meta, const Tensor& dump) {
    if (dump.per_sample() != meta.act_elems_per_sample)
        throw DataError("layer " + std::to_string(meta.index) + ": act_elems_per_sample " +
                        std::to_string(meta.act_elems_per_sample) + " does not match dump (" +
                        std::to_string(dump.per_sample()) + " elements per sample)");
}

// ---------------------------------------------------------------------------
// Pools

inline constexpr std::size_t kDefaultPoolCap = 40;

struct PoolSource {
    std::string id;
    std::size_t batch_size = 0;
};

/// Flattened per-sample activations of one layer, rows in source order.
struct ActivationPool {
    std::size_t layer_index = 0;
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;
    std::vector<PoolSource> sources;
    std::uint64_t seed = 0;

    std::span<const double> row(std::size_t i) const { return {data.data() + i * cols, cols}; }
    homology::PointCloud cloud() const { return homology::PointCloud(rows, cols, data); }
};

/// Concatenates batches row-wise. When more than `pool_cap` rows arrive, keeps
/// a seeded uniform subset of exactly `pool_cap` rows in their original order.
inline ActivationPool accumulate_pool(std::span<const Tensor> batches, const LayerMeta& meta, std::size_t pool_cap,
                                      std::uint64_t seed, std::span<const std::string> ids = {}) {
    require(!batches.empty(), "layer " + std::to_string(meta.index) + ": no activation batches to pool");
    require(pool_cap >= 1, "pool cap must be at least 1");
    require(ids.empty() || ids.size() == batches.size(), "pool: one id per batch required");

    ActivationPool pool;
    pool.layer_index = meta.index;
    pool.cols = meta.act_elems_per_sample;
    pool.seed = seed;
    for (std::size_t b = 0; b < batches.size(); ++b) {
        const Tensor& t = batches[b];
        if (t.per_sample() != meta.act_elems_per_sample)
            throw DataError("layer " + std::to_string(meta.index) + ": batch " + std::to_string(b) + " flattens to " +
                            std::to_string(t.per_sample()) + " elements per sample, expected " +
                            std::to_string(meta.act_elems_per_sample));
        pool.data.insert(pool.data.end(), t.data.begin(), t.data.end());
        pool.rows += t.batch();
        pool.sources.push_back({ids.empty() ? "batch" + std::to_string(b) : ids[b], t.batch()});
    }

    if (pool.rows > pool_cap) {
        std::vector<std::size_t> all(pool.rows), keep;
        std::iota(all.begin(), all.end(), std::size_t{0});
        keep.reserve(pool_cap);
        std::mt19937_64 rng(seed);
        std::sample(all.begin(), all.end(), std::back_inserter(keep), pool_cap, rng);
        std::vector<double> kept;
        kept.reserve(pool_cap * pool.cols);
        for (auto r : keep) kept.insert(kept.end(), pool.data.begin() + r * pool.cols, pool.data.begin() + (r + 1) * pool.cols);
        pool.data = std::move(kept);
        pool.rows = pool_cap;
    }
    return pool;
}

/// Per-feature standardization (zero mean, unit variance). Constant features
/// become zero. Opt-in; selection uses raw coordinates by default.
inline ActivationPool standardize_columns(ActivationPool pool) {
    for (std::size_t c = 0; c < pool.cols; ++c) {
        double mean = 0;
        for (std::size_t r = 0; r < pool.rows; ++r) mean += pool.data[r * pool.cols + c];
        mean /= static_cast<double>(pool.rows);
        double var = 0;
        for (std::size_t r = 0; r < pool.rows; ++r) var += std::pow(pool.data[r * pool.cols + c] - mean, 2);
        const double sd = std::sqrt(var / static_cast<double>(pool.rows));
        for (std::size_t r = 0; r < pool.rows; ++r) {
            double& v = pool.data[r * pool.cols + c];
            v = sd > 0 ? (v - mean) / sd : 0.0;
        }
    }
    return pool;
}

// ---------------------------------------------------------------------------
// Dump directory: layer{index:04}_batch{b:04}.npy and optional .grad.npy

inline std::string dump_file_name(std::size_t layer, std::size_t batch, bool gradient = false) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "layer%04zu_batch%04zu%s", layer, batch, gradient ? ".grad.npy" : ".npy");
    return buf;
}

class DumpDirectory {
public:
    struct Entry {
        std::size_t batch;
        std::filesystem::path activations;
        std::optional<std::filesystem::path> gradients;
    };

    explicit DumpDirectory(std::filesystem::path root) : root_(std::move(root)) {
        if (!std::filesystem::is_directory(root_)) throw DataError("dump directory not found: " + root_.string());
        static const std::regex pattern(R"(layer(\d{4})_batch(\d{4})(\.grad)?\.npy)");
        std::map<std::size_t, std::map<std::size_t, Entry>> found;
        std::vector<std::pair<std::size_t, std::size_t>> grads;
        for (const auto& de : std::filesystem::directory_iterator(root_)) {
            const std::string name = de.path().filename().string();
            std::smatch m;
            if (!std::regex_match(name, m, pattern)) continue;
            const std::size_t layer = std::stoul(m[1]), batch = std::stoul(m[2]);
            auto& e = found[layer][batch];
            e.batch = batch;
            if (m[3].matched)
                e.gradients = de.path();
            else
                e.activations = de.path();
        }
        for (auto& [layer, batches] : found)
            for (auto& [batch, e] : batches) {
                if (e.activations.empty())
                    throw DataError("gradient dump without activations: " + dump_file_name(layer, batch, true));
                layers_[layer].push_back(e);
            }
    }

    const std::filesystem::path& root() const { return root_; }

    std::vector<std::size_t> layers() const {
        std::vector<std::size_t> out;
        for (const auto& [l, _] : layers_) out.push_back(l);
        return out;
    }

    const std::vector<Entry>& entries(std::size_t layer) const {
        const auto it = layers_.find(layer);
        if (it == layers_.end()) throw DataError("no activation dumps for layer " + std::to_string(layer));
        return it->second;
    }

    std::vector<Tensor> load_activations(std::size_t layer, std::vector<std::string>* ids = nullptr) const {
        std::vector<Tensor> out;
        for (const auto& e : entries(layer)) {
            out.push_back(load(e.activations));
            if (ids) ids->push_back(e.activations.filename().string());
        }
        return out;
    }

    std::vector<Tensor> load_gradients(std::size_t layer) const {
        std::vector<Tensor> out;
        for (const auto& e : entries(layer)) {
            if (!e.gradients)
                throw DataError("missing gradient dump " + dump_file_name(layer, e.batch, true));
            out.push_back(load(*e.gradients));
        }
        return out;
    }

    /// Every file opened through this object, in open order.
    std::vector<std::filesystem::path> opened() const {
        std::lock_guard lock(mutex_);
        return opened_;
    }

private:
    Tensor load(const std::filesystem::path& p) const {
        {
            std::lock_guard lock(mutex_);
            opened_.push_back(p);
        }
        try {
            return read_npy(read_file(p));
        } catch (const NpyError& e) {
            throw NpyError(p.filename().string() + ": " + e.what());
        }
    }

    std::filesystem::path root_;
    std::map<std::size_t, std::vector<Entry>> layers_;
    mutable std::mutex mutex_;
    mutable std::vector<std::filesystem::path> opened_;
};

}  // namespace adabet
