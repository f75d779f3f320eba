// SPDX-License-Identifier: Apache-2.0
//
// On-disk formats. Tensors are "MLIB" blobs (f32, little-endian, row-major);
// every artifact directory carries a JSON manifest whose content_hash covers the
// manifest (minus the hash) and every blob it references. f64 values in memory
// are truncated to f32 on save.
#pragma once

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <cerrno>
#include <charconv>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "modlib/adapters.hpp"
#include "modlib/dataset.hpp"
#include "modlib/error.hpp"
#include "modlib/evalharness.hpp"
#include "modlib/hash.hpp"
#include "modlib/linalg.hpp"
#include "modlib/router.hpp"
#include "modlib/synthtasks.hpp"
#include "modlib/toymodel.hpp"

namespace modlib {

namespace fs = std::filesystem;
using Json = nlohmann::json;

inline constexpr std::uint16_t kBlobVersion = 1;
inline constexpr std::uint8_t kDtypeF32 = 1;
inline constexpr int kManifestVersion = 1;

// ---------------------------------------------------------------------------
// Tensor blobs

using Bytes = std::vector<std::uint8_t>;

namespace detail {

inline void put_u16(Bytes& b, std::uint16_t v) {
    b.push_back(static_cast<std::uint8_t>(v));
    b.push_back(static_cast<std::uint8_t>(v >> 8));
}

inline void put_u32(Bytes& b, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) {
        b.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
}

inline std::uint32_t get_u32(const std::uint8_t* p) {
    return static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 |
           static_cast<std::uint32_t>(p[2]) << 16 | static_cast<std::uint32_t>(p[3]) << 24;
}

}  // namespace detail

struct TensorBlob {
    std::vector<std::uint32_t> dims;
    std::vector<float> values;

    static TensorBlob from(const Matrix& m) {
        TensorBlob t;
        t.dims = {static_cast<std::uint32_t>(m.rows()), static_cast<std::uint32_t>(m.cols())};
        t.values.reserve(m.data().size());
        for (double v : m.data()) {
            t.values.push_back(static_cast<float>(v));
        }
        return t;
    }

    static TensorBlob from(std::span<const double> v) {
        TensorBlob t;
        t.dims = {static_cast<std::uint32_t>(v.size())};
        for (double x : v) {
            t.values.push_back(static_cast<float>(x));
        }
        return t;
    }

    Matrix matrix() const {
        if (dims.size() != 2) {
            throw IntegrityError("tensor blob: expected 2 dims, found " + std::to_string(dims.size()));
        }
        return Matrix(dims[0], dims[1], std::vector<double>(values.begin(), values.end()));
    }

    Vector vector() const {
        if (dims.size() != 1) {
            throw IntegrityError("tensor blob: expected 1 dim, found " + std::to_string(dims.size()));
        }
        return Vector(values.begin(), values.end());
    }

    Bytes encode() const {
        Bytes b{'M', 'L', 'I', 'B'};
        detail::put_u16(b, kBlobVersion);
        b.push_back(kDtypeF32);
        b.push_back(static_cast<std::uint8_t>(dims.size()));
        for (std::uint32_t d : dims) {
            detail::put_u32(b, d);
        }
        for (float f : values) {
            std::uint32_t u = 0;
            std::memcpy(&u, &f, 4);
            detail::put_u32(b, u);
        }
        return b;
    }

    static TensorBlob decode(std::span<const std::uint8_t> b) {
        if (b.size() < 8 || std::memcmp(b.data(), "MLIB", 4) != 0) {
            throw IntegrityError("tensor blob: bad magic or truncated header");
        }
        const std::uint16_t version = static_cast<std::uint16_t>(b[4] | b[5] << 8);
        if (version != kBlobVersion) {
            throw IntegrityError("tensor blob: unsupported version " + std::to_string(version));
        }
        if (b[6] != kDtypeF32) {
            throw IntegrityError("tensor blob: unsupported dtype tag " + std::to_string(b[6]));
        }
        const std::size_t ndim = b[7];
        if (b.size() < 8 + 4 * ndim) {
            throw IntegrityError("tensor blob: truncated dims");
        }
        TensorBlob t;
        std::size_t count = 1;
        for (std::size_t i = 0; i < ndim; ++i) {
            t.dims.push_back(detail::get_u32(b.data() + 8 + 4 * i));
            count *= t.dims.back();
        }
        const std::size_t off = 8 + 4 * ndim;
        if (b.size() != off + 4 * count) {
            throw IntegrityError("tensor blob: payload is " + std::to_string(b.size() - off) + " bytes, expected " +
                                 std::to_string(4 * count));
        }
        t.values.resize(count);
        for (std::size_t i = 0; i < count; ++i) {
            const std::uint32_t u = detail::get_u32(b.data() + off + 4 * i);
            std::memcpy(&t.values[i], &u, 4);
        }
        return t;
    }
};

// ---------------------------------------------------------------------------
// Files and locking

inline Bytes read_bytes(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) {
        throw Error("cannot open " + p.string());
    }
    return Bytes(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_bytes(const fs::path& p, std::span<const std::uint8_t> b) {
    fs::create_directories(p.parent_path());
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw Error("cannot write " + p.string());
    }
    out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
    if (!out) {
        throw Error("short write to " + p.string());
    }
}

inline void write_text(const fs::path& p, std::string_view s) {
    write_bytes(p, std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
}

inline std::string read_text(const fs::path& p) {
    const Bytes b = read_bytes(p);
    return std::string(b.begin(), b.end());
}

/// Exclusive advisory lock on `<dir>/.lock` for the lifetime of the object.
class DirLock {
public:
    explicit DirLock(const fs::path& dir) {
        fs::create_directories(dir);
        const fs::path p = dir / ".lock";
        fd_ = ::open(p.c_str(), O_RDWR | O_CREAT, 0644);
        if (fd_ < 0) {
            throw Error("cannot open lock file " + p.string() + ": " + std::strerror(errno));
        }
        if (::flock(fd_, LOCK_EX) != 0) {
            ::close(fd_);
            throw Error("cannot lock " + p.string() + ": " + std::strerror(errno));
        }
    }
    ~DirLock() {
        if (fd_ >= 0) {
            ::flock(fd_, LOCK_UN);
            ::close(fd_);
        }
    }
    DirLock(const DirLock&) = delete;
    DirLock& operator=(const DirLock&) = delete;

private:
    int fd_ = -1;
};

namespace detail {

/// Writes blobs and the manifest; the hash covers manifest-without-hash then blobs in listed order.
class ArtifactWriter {
public:
    explicit ArtifactWriter(fs::path dir) : dir_(std::move(dir)) {}

    std::string add(const std::string& rel, const TensorBlob& t) {
        blobs_.emplace_back(rel, t.encode());
        return rel;
    }

    void finish(Json manifest, const std::string& manifest_name) {
        Json files = Json::array();
        for (const auto& [rel, _] : blobs_) {
            files.push_back(rel);
        }
        manifest["files"] = files;
        manifest.erase("content_hash");
        Sha256 h;
        h.update(manifest.dump());
        for (const auto& [rel, bytes] : blobs_) {
            h.update(rel);
            h.update(std::as_bytes(std::span(bytes)));
        }
        manifest["content_hash"] = h.hex();
        for (const auto& [rel, bytes] : blobs_) {
            write_bytes(dir_ / rel, bytes);
        }
        write_text(dir_ / manifest_name, manifest.dump(2) + "\n");
    }

private:
    fs::path dir_;
    std::vector<std::pair<std::string, Bytes>> blobs_;
};

/// Reads the manifest, verifies format version and content hash, serves blobs.
class ArtifactReader {
public:
    ArtifactReader(fs::path dir, const std::string& manifest_name) : dir_(std::move(dir)) {
        const fs::path mp = dir_ / manifest_name;
        if (!fs::exists(mp)) {
            throw Error("missing manifest " + mp.string());
        }
        try {
            manifest_ = Json::parse(read_text(mp));
        } catch (const Json::parse_error& e) {
            throw IntegrityError("manifest " + mp.string() + " is not valid JSON: " + e.what());
        }
        const int version = manifest_.value("format_version", -1);
        if (version != kManifestVersion) {
            throw IntegrityError("manifest " + mp.string() + ": unsupported format version " + std::to_string(version));
        }
        const std::string stored = manifest_.value("content_hash", std::string());
        Json bare = manifest_;
        bare.erase("content_hash");
        Sha256 h;
        h.update(bare.dump());
        for (const std::string rel : manifest_.at("files")) {
            Bytes b = read_bytes(dir_ / rel);
            h.update(rel);
            h.update(std::as_bytes(std::span(b)));
            blobs_.emplace(rel, std::move(b));
        }
        const std::string actual = h.hex();
        if (actual != stored) {
            throw IntegrityError("content hash mismatch in " + dir_.string() + ": manifest says " + stored +
                                 ", contents hash to " + actual);
        }
    }

    const Json& manifest() const noexcept { return manifest_; }

    TensorBlob blob(const std::string& rel) const {
        auto it = blobs_.find(rel);
        if (it == blobs_.end()) {
            throw IntegrityError("blob " + rel + " is not listed in the manifest");
        }
        return TensorBlob::decode(it->second);
    }

private:
    fs::path dir_;
    Json manifest_;
    std::map<std::string, Bytes> blobs_;
};

inline void clear_artifacts(const fs::path& dir, std::initializer_list<const char*> entries) {
    for (const char* e : entries) {
        fs::remove_all(dir / e);
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Libraries

inline constexpr const char* kLibraryManifest = "manifest.json";

/// `report` (optional) is stored verbatim under "report" and covered by the hash.
inline void save_library(const Library& lib, const fs::path& dir, const Json& report = nullptr) {
    DirLock lock(dir);
    detail::clear_artifacts(dir, {"experts", kLibraryManifest});
    detail::ArtifactWriter w(dir);
    Json m;
    m["format_version"] = kManifestVersion;
    m["kind"] = "library";
    m["base_model_fingerprint"] = lib.base_model_fingerprint;
    m["rank"] = lib.rank;
    m["scaling"] = lib.scaling;
    m["builder"] = lib.builder;
    m["training_steps"] = lib.training_steps;
    m["seeds"] = lib.seeds;
    Json experts = Json::array();
    for (std::size_t i = 0; i < lib.experts.size(); ++i) {
        const Expert& e = lib.experts[i];
        Json je;
        je["name"] = e.name;
        je["provenance"] = std::string(to_string(e.provenance.tag));
        je["member_tasks"] = e.provenance.member_tasks;
        if (!e.provenance.weights.empty()) {
            je["weights"] = e.provenance.weights;
        }
        Json layers = Json::array();
        for (const LoraAdapter& ad : e.adapters) {
            const std::string stem = "experts/" + std::to_string(i) + "/layer" + std::to_string(ad.layer_id);
            layers.push_back({{"layer_id", ad.layer_id},
                              {"a", w.add(stem + ".a.mlib", TensorBlob::from(ad.a))},
                              {"b", w.add(stem + ".b.mlib", TensorBlob::from(ad.b))}});
        }
        je["layers"] = layers;
        experts.push_back(je);
    }
    m["experts"] = experts;
    if (lib.cluster_assignment) {
        const ClusterAssignment& ca = *lib.cluster_assignment;
        m["cluster_assignment"] = {{"labels", ca.labels}, {"k", ca.k}, {"inertia", ca.inertia},
                                   {"seed", ca.seed},     {"iterations", ca.iterations}};
    }
    if (!report.is_null()) {
        m["report"] = report;
    }
    w.finish(std::move(m), kLibraryManifest);
}

inline Library load_library(const fs::path& dir) {
    DirLock lock(dir);
    const detail::ArtifactReader r(dir, kLibraryManifest);
    const Json& m = r.manifest();
    if (m.value("kind", std::string()) != "library") {
        throw IntegrityError(dir.string() + " does not hold a library");
    }
    Library lib;
    lib.base_model_fingerprint = m.at("base_model_fingerprint");
    lib.rank = m.at("rank");
    lib.scaling = m.at("scaling");
    lib.builder = m.at("builder");
    lib.training_steps = m.at("training_steps");
    lib.seeds = m.at("seeds").get<std::map<std::string, std::uint64_t>>();
    for (const Json& je : m.at("experts")) {
        Expert e;
        e.name = je.at("name");
        e.provenance.tag = builder_tag_from_string(je.at("provenance").get<std::string>());
        e.provenance.member_tasks = je.at("member_tasks").get<std::vector<int>>();
        if (je.contains("weights")) {
            e.provenance.weights = je.at("weights").get<std::vector<double>>();
        }
        for (const Json& jl : je.at("layers")) {
            LoraAdapter ad;
            ad.layer_id = jl.at("layer_id");
            ad.a = r.blob(jl.at("a")).matrix();
            ad.b = r.blob(jl.at("b")).matrix();
            ad.scaling = lib.scaling;
            e.adapters.push_back(std::move(ad));
        }
        lib.experts.push_back(std::move(e));
    }
    if (m.contains("cluster_assignment")) {
        const Json& jc = m.at("cluster_assignment");
        ClusterAssignment ca;
        ca.labels = jc.at("labels").get<std::vector<std::size_t>>();
        ca.k = jc.at("k");
        ca.inertia = jc.at("inertia");
        ca.seed = jc.at("seed");
        ca.iterations = jc.at("iterations");
        lib.cluster_assignment = std::move(ca);
    }
    return lib;
}

/// Manifest of a saved library, parsed and hash-verified.
inline Json read_manifest(const fs::path& dir, const char* name = kLibraryManifest) {
    return detail::ArtifactReader(dir, name).manifest();
}

// ---------------------------------------------------------------------------
// Base model

inline constexpr const char* kModelManifest = "model.json";

inline void save_model(const ToyModel& model, const fs::path& dir) {
    DirLock lock(dir);
    detail::clear_artifacts(dir, {"model", kModelManifest});
    detail::ArtifactWriter w(dir);
    Json m;
    m["format_version"] = kManifestVersion;
    m["kind"] = "model";
    m["activation"] = model.activation == Activation::tanh ? "tanh" : "identity";
    m["fingerprint"] = model.fingerprint;
    Json layers = Json::array();
    for (std::size_t l = 0; l < model.depth(); ++l) {
        const std::string stem = "model/layer" + std::to_string(l);
        layers.push_back({{"w", w.add(stem + ".w.mlib", TensorBlob::from(model.weights[l]))},
                          {"bias", w.add(stem + ".bias.mlib", TensorBlob::from(model.biases[l]))}});
    }
    m["layers"] = layers;
    m["head"] = w.add("model/head.mlib", TensorBlob::from(model.head));
    w.finish(std::move(m), kModelManifest);
}

inline ToyModel load_model(const fs::path& dir) {
    DirLock lock(dir);
    const detail::ArtifactReader r(dir, kModelManifest);
    const Json& m = r.manifest();
    ToyModel model;
    model.activation = m.at("activation") == "tanh" ? Activation::tanh : Activation::identity;
    for (const Json& jl : m.at("layers")) {
        model.weights.push_back(r.blob(jl.at("w")).matrix());
        model.biases.push_back(r.blob(jl.at("bias")).vector());
    }
    model.head = r.blob(m.at("head")).matrix();
    model.fingerprint = compute_fingerprint(model);
    if (model.fingerprint != m.at("fingerprint").get<std::string>()) {
        throw IntegrityError("model fingerprint mismatch in " + dir.string());
    }
    return model;
}

// ---------------------------------------------------------------------------
// Prototype banks

inline constexpr const char* kPrototypeManifest = "prototypes.json";

inline void save_prototypes(const PrototypeBank& bank, const fs::path& dir) {
    DirLock lock(dir);
    detail::clear_artifacts(dir, {"prototypes", kPrototypeManifest});
    detail::ArtifactWriter w(dir);
    Json m;
    m["format_version"] = kManifestVersion;
    m["kind"] = "prototypes";
    m["source"] = bank.source == PrototypeSource::arrow ? "arrow" : "cm";
    Json layers = Json::array();
    for (std::size_t l = 0; l < bank.layers.size(); ++l) {
        layers.push_back(w.add("prototypes/layer" + std::to_string(l) + ".mlib", TensorBlob::from(bank.layers[l])));
    }
    m["layers"] = layers;
    w.finish(std::move(m), kPrototypeManifest);
}

inline PrototypeBank load_prototypes(const fs::path& dir) {
    DirLock lock(dir);
    const detail::ArtifactReader r(dir, kPrototypeManifest);
    const Json& m = r.manifest();
    PrototypeBank bank;
    bank.source = m.at("source") == "arrow" ? PrototypeSource::arrow : PrototypeSource::cm;
    for (const std::string rel : m.at("layers")) {
        bank.layers.push_back(r.blob(rel).matrix());
    }
    return bank;
}

// ---------------------------------------------------------------------------
// Benchmarks (datasets plus the metadata the pipeline needs)

inline constexpr const char* kBenchmarkManifest = "benchmark.json";

struct StoredBenchmark {
    std::vector<TaskDataset> datasets;
    std::map<int, std::size_t> planted_cluster;
    std::vector<int> train_tasks;
    std::vector<int> heldout_tasks;
    std::uint64_t master_seed = 0;

    const TaskDataset& dataset(int id) const {
        for (const TaskDataset& d : datasets) {
            if (d.task_id == id) {
                return d;
            }
        }
        throw ContractError("unknown task id " + std::to_string(id));
    }
};

inline TaskPool make_pool(const StoredBenchmark& b) {
    TaskPool p;
    for (int id : b.train_tasks) {
        p.train.push_back(&b.dataset(id));
        p.planted.push_back(b.planted_cluster.at(id));
    }
    for (int id : b.heldout_tasks) {
        p.heldout.push_back(&b.dataset(id));
    }
    return p;
}

inline void save_benchmark(const Benchmark& b, const HeldoutSplit& hs, const fs::path& dir) {
    DirLock lock(dir);
    detail::clear_artifacts(dir, {"tasks", kBenchmarkManifest});
    detail::ArtifactWriter w(dir);
    Json m;
    m["format_version"] = kManifestVersion;
    m["kind"] = "benchmark";
    m["master_seed"] = b.config.master_seed;
    m["train_tasks"] = hs.train_tasks;
    m["heldout_tasks"] = hs.heldout_tasks;
    Json tasks = Json::array();
    for (const TaskDataset& d : b.datasets) {
        const std::string stem = "tasks/" + std::to_string(d.task_id) + "/";
        Json jt{{"task_id", d.task_id}, {"cluster_id", b.spec(d.task_id).cluster_id}};
        for (auto [name, split] : {std::pair{"train", &d.train}, {"valid", &d.valid}, {"test", &d.test}}) {
            jt[name] = {{"x", w.add(stem + name + ".x.mlib", TensorBlob::from(split->x))},
                        {"y", w.add(stem + name + ".y.mlib", TensorBlob::from(split->y))}};
        }
        tasks.push_back(jt);
    }
    m["tasks"] = tasks;
    w.finish(std::move(m), kBenchmarkManifest);
}

inline StoredBenchmark load_benchmark(const fs::path& dir) {
    DirLock lock(dir);
    const detail::ArtifactReader r(dir, kBenchmarkManifest);
    const Json& m = r.manifest();
    StoredBenchmark out;
    out.master_seed = m.at("master_seed");
    out.train_tasks = m.at("train_tasks").get<std::vector<int>>();
    out.heldout_tasks = m.at("heldout_tasks").get<std::vector<int>>();
    for (const Json& jt : m.at("tasks")) {
        TaskDataset d;
        d.task_id = jt.at("task_id");
        out.planted_cluster[d.task_id] = jt.at("cluster_id");
        auto split = [&](const char* name) {
            return Split{r.blob(jt.at(name).at("x")).matrix(), r.blob(jt.at(name).at("y")).matrix()};
        };
        d.train = split("train");
        d.valid = split("valid");
        d.test = split("test");
        out.datasets.push_back(std::move(d));
    }
    return out;
}

// ---------------------------------------------------------------------------
// key=value configuration

using ConfigMap = std::map<std::string, std::string>;

/// Parses `key = value` lines; '#' starts a comment. Duplicate keys are an error.
inline ConfigMap parse_config(std::string_view text, std::string_view origin = "config") {
    ConfigMap out;
    std::istringstream in{std::string(text)};
    std::string line;
    std::size_t lineno = 0;
    auto trim = [](std::string s) {
        const auto b = s.find_first_not_of(" \t\r");
        const auto e = s.find_last_not_of(" \t\r");
        return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    while (std::getline(in, line)) {
        ++lineno;
        if (const auto hash = line.find('#'); hash != std::string::npos) {
            line.erase(hash);
        }
        line = trim(line);
        if (line.empty()) {
            continue;
        }
        const auto eq = line.find('=');
        const std::string where = std::string(origin) + ":" + std::to_string(lineno);
        if (eq == std::string::npos) {
            throw ContractError(where + ": expected key = value");
        }
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty()) {
            throw ContractError(where + ": empty key");
        }
        if (!out.emplace(key, value).second) {
            throw ContractError(where + ": duplicate key '" + key + "'");
        }
    }
    return out;
}

inline ConfigMap load_config(const fs::path& p) { return parse_config(read_text(p), p.string()); }

namespace detail {

template <class T>
T parse_number(const std::string& key, const std::string& v) {
    T out{};
    const char* end = v.data() + v.size();
    auto [ptr, ec] = std::from_chars(v.data(), end, out);
    if (ec != std::errc() || ptr != end) {
        throw ContractError("config key '" + key + "': cannot parse '" + v + "' as a number");
    }
    return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ContractError("config key '" + key + "': expected true/false, got '" + v + "'");
}

inline std::vector<std::size_t> parse_list(const std::string& key, const std::string& v) {
    std::vector<std::size_t> out;
    std::istringstream in(v);
    std::string item;
    while (std::getline(in, item, ',')) {
        out.push_back(parse_number<std::size_t>(key, item));
    }
    if (out.empty()) {
        throw ContractError("config key '" + key + "': empty list");
    }
    return out;
}

}  // namespace detail

/// Known config keys, each with its setter.
inline std::map<std::string, std::function<void(PipelineConfig&, const std::string&, const std::string&)>>
config_setters() {
    using detail::parse_bool;
    using detail::parse_number;
    using K = const std::string&;
    using V = const std::string&;
    using P = PipelineConfig&;
    return {
        {"seed", [](P c, K k, V v) { c.set_seed(parse_number<std::uint64_t>(k, v)); }},
        {"benchmark.seed", [](P c, K k, V v) { c.benchmark.master_seed = parse_number<std::uint64_t>(k, v); }},
        {"benchmark.clusters", [](P c, K k, V v) { c.benchmark.n_clusters_planted = parse_number<std::size_t>(k, v); }},
        {"benchmark.tasks_per_cluster", [](P c, K k, V v) { c.benchmark.tasks_per_cluster = parse_number<std::size_t>(k, v); }},
        {"benchmark.heldout", [](P c, K k, V v) { c.benchmark.held_out_task_count = parse_number<std::size_t>(k, v); }},
        {"benchmark.train_samples", [](P c, K k, V v) { c.benchmark.train_samples = parse_number<std::size_t>(k, v); }},
        {"benchmark.valid_samples", [](P c, K k, V v) { c.benchmark.valid_samples = parse_number<std::size_t>(k, v); }},
        {"benchmark.test_samples", [](P c, K k, V v) { c.benchmark.test_samples = parse_number<std::size_t>(k, v); }},
        {"benchmark.noise_std", [](P c, K k, V v) { c.benchmark.noise_std = parse_number<double>(k, v); }},
        {"benchmark.perturbation", [](P c, K k, V v) { c.benchmark.intra_cluster_perturbation = parse_number<double>(k, v); }},
        {"benchmark.separation", [](P c, K k, V v) { c.benchmark.inter_cluster_separation = parse_number<double>(k, v); }},
        {"benchmark.teacher_rank", [](P c, K k, V v) { c.benchmark.teacher_rank = parse_number<std::size_t>(k, v); }},
        {"benchmark.input_shift", [](P c, K k, V v) { c.benchmark.input_shift = parse_number<double>(k, v); }},
        {"benchmark.input_spread", [](P c, K k, V v) { c.benchmark.input_spread = parse_number<double>(k, v); }},
        {"benchmark.input_jitter", [](P c, K k, V v) { c.benchmark.input_jitter = parse_number<double>(k, v); }},
        {"benchmark.shared_component", [](P c, K k, V v) { c.benchmark.shared_component = parse_number<double>(k, v); }},
        {"pretrain.steps", [](P c, K k, V v) { c.pretrain.train.steps = parse_number<std::size_t>(k, v); }},
        {"pretrain.lr", [](P c, K k, V v) { c.pretrain.train.learning_rate = parse_number<double>(k, v); }},
        {"pretrain.seed", [](P c, K k, V v) { c.pretrain.train.seed = parse_number<std::uint64_t>(k, v); }},
        {"build.seed", [](P c, K k, V v) { c.build.seed = parse_number<std::uint64_t>(k, v); }},
        {"build.k", [](P c, K k, V v) { c.k = parse_number<std::size_t>(k, v); }},
        {"build.steps_per_task", [](P c, K k, V v) { c.budget.steps_per_task = parse_number<std::size_t>(k, v); }},
        {"build.clustering_fraction", [](P c, K k, V v) { c.budget.clustering_fraction = parse_number<double>(k, v); }},
        {"build.lr", [](P c, K k, V v) { c.build.train.learning_rate = parse_number<double>(k, v); }},
        {"build.batch", [](P c, K k, V v) { c.build.train.batch_size = parse_number<std::size_t>(k, v); }},
        {"build.rank", [](P c, K k, V v) { c.build.adapter.rank = parse_number<std::size_t>(k, v); }},
        {"build.alpha", [](P c, K k, V v) { c.build.adapter.alpha = parse_number<double>(k, v); }},
        {"build.b_init_std", [](P c, K k, V v) { c.build.adapter.b_init_std = parse_number<double>(k, v); }},
        {"build.warm_start", [](P c, K k, V v) { c.build.warm_start = parse_bool(k, v); }},
        {"build.shared_init", [](P c, K k, V v) { c.build.shared_init = parse_bool(k, v); }},
        {"route.router", [](P c, K, V v) { c.router.kind = router_kind_from_string(v); }},
        {"route.top_k", [](P c, K k, V v) { c.router.top_k = parse_number<std::size_t>(k, v); }},
        {"route.temperature", [](P c, K k, V v) { c.router.temperature = parse_number<double>(k, v); }},
        {"adapt.steps", [](P c, K k, V v) { c.adapt.train.steps = parse_number<std::size_t>(k, v); }},
        {"adapt.lr", [](P c, K k, V v) { c.adapt.train.learning_rate = parse_number<double>(k, v); }},
        {"adapt.data_fraction", [](P c, K k, V v) { c.data_fraction = parse_number<double>(k, v); }},
        {"adapt.lorahub_budget", [](P c, K k, V v) { c.adapt.lorahub.forward_budget = parse_number<std::size_t>(k, v); }},
        {"experiment.pairs", [](P c, K k, V v) { c.transfer.n_pairs = parse_number<std::size_t>(k, v); }},
        {"experiment.samples", [](P c, K k, V v) { c.norm_samples = parse_number<std::size_t>(k, v); }},
        {"experiment.k_values", [](P c, K k, V v) { c.k_values = detail::parse_list(k, v); }},
        {"eval.seed", [](P c, K k, V v) { c.eval_seed = parse_number<std::uint64_t>(k, v); }},
    };
}

/// Applies config entries in key order; unknown keys are rejected.
inline void apply_config(PipelineConfig& cfg, const ConfigMap& kv) {
    const auto setters = config_setters();
    for (const auto& [k, v] : kv) {
        auto it = setters.find(k);
        if (it == setters.end()) {
            throw ContractError("unknown config key '" + k + "'");
        }
        it->second(cfg, k, v);
    }
    cfg.transfer.build = cfg.build;
    cfg.transfer.steps_per_task = cfg.budget.steps_per_task;
}

}  // namespace modlib
