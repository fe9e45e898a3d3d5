#pragma once

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>

#include <json.hpp>

#include "voxlift/decoder.hpp"
#include "voxlift/evalkit.hpp"
#include "voxlift/pooling.hpp"
#include "voxlift/scenegen.hpp"

namespace voxlift {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// raw float32 blobs (little-endian, row-major; shapes live in JSON sidecars
// or in the manifest)

inline void write_f32_blob(const std::filesystem::path& path, const std::vector<float>& values) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
    out.write(reinterpret_cast<const char*>(values.data()),
              static_cast<std::streamsize>(values.size() * sizeof(float)));
    if (!out) throw std::runtime_error("write failed: " + path.string());
}

inline std::vector<float> read_f32_blob(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary | std::ios::ate);
    if (!in) throw std::runtime_error("cannot open: " + path.string());
    const std::streamsize bytes = in.tellg();
    if (bytes % 4 != 0) throw std::runtime_error("blob size not a multiple of 4: " + path.string());
    std::vector<float> values(static_cast<std::size_t>(bytes) / 4);
    in.seekg(0);
    in.read(reinterpret_cast<char*>(values.data()), bytes);
    if (!in) throw std::runtime_error("read failed: " + path.string());
    return values;
}

// ---------------------------------------------------------------------------
// named tensor maps

struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<float> data;

    std::size_t count() const {
        std::size_t n = 1;
        for (std::size_t s : shape) n *= s;
        return n;
    }
};

using TensorMap = std::map<std::string, Tensor>;  // sorted keys fix blob order

inline Tensor tensor_from_matrix(const Matrix& m) {
    Tensor t;
    t.shape = {m.rows(), m.cols()};
    t.data.resize(m.size());
    for (std::size_t i = 0; i < m.size(); ++i) t.data[i] = static_cast<float>(m.data()[i]);
    return t;
}

inline Tensor tensor_from_vector(const std::vector<double>& v) {
    Tensor t;
    t.shape = {v.size()};
    t.data.resize(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) t.data[i] = static_cast<float>(v[i]);
    return t;
}

inline Matrix matrix_from_tensor(const Tensor& t) {
    if (t.shape.size() != 2) throw std::runtime_error("tensor is not 2-d");
    Matrix m(t.shape[0], t.shape[1]);
    for (std::size_t i = 0; i < m.size(); ++i) m.data()[i] = t.data[i];
    return m;
}

inline std::vector<double> vector_from_tensor(const Tensor& t) {
    if (t.shape.size() != 1) throw std::runtime_error("tensor is not 1-d");
    return std::vector<double>(t.data.begin(), t.data.end());
}

namespace detail {

inline json tensor_header(const TensorMap& tensors) {
    json header = json::object();
    std::size_t offset = 0;
    for (const auto& [name, tensor] : tensors) {
        header[name] = {{"shape", tensor.shape}, {"dtype", "f32"}, {"offset", offset}};
        offset += tensor.count() * sizeof(float);
    }
    return header;
}

inline void append_blobs(std::ofstream& out, const TensorMap& tensors) {
    for (const auto& [name, tensor] : tensors) {
        (void)name;
        out.write(reinterpret_cast<const char*>(tensor.data.data()),
                  static_cast<std::streamsize>(tensor.data.size() * sizeof(float)));
    }
}

inline TensorMap tensors_from_header(const json& header, const std::vector<char>& blob,
                                     const std::string& origin) {
    TensorMap tensors;
    for (auto it = header.begin(); it != header.end(); ++it) {
        if (it.key() == "__meta__") continue;
        const json& entry = it.value();
        Tensor t;
        t.shape = entry.at("shape").get<std::vector<std::size_t>>();
        if (entry.at("dtype").get<std::string>() != "f32")
            throw std::runtime_error("unsupported dtype in " + origin);
        const std::size_t offset = entry.at("offset").get<std::size_t>();
        const std::size_t bytes = t.count() * sizeof(float);
        if (offset + bytes > blob.size()) throw std::runtime_error("tensor out of bounds in " + origin);
        t.data.resize(t.count());
        std::memcpy(t.data.data(), blob.data() + offset, bytes);
        tensors.emplace(it.key(), std::move(t));
    }
    return tensors;
}

}  // namespace detail

constexpr char kWeightMagic[8] = {'V', 'X', 'L', 'W', 'G', 'T', '0', '1'};

/// Self-contained container: 8-byte magic, u64 little-endian header length,
/// UTF-8 JSON header mapping tensor name -> {shape, dtype, offset}, then the
/// raw float32 blobs. The init seed rides along under the reserved "__meta__"
/// header key.
inline void write_tensor_container(const std::filesystem::path& path, const TensorMap& tensors,
                                   std::uint64_t seed) {
    json header = detail::tensor_header(tensors);
    header["__meta__"] = {{"seed", seed}};
    const std::string header_str = header.dump();

    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
    out.write(kWeightMagic, 8);
    const std::uint64_t len = header_str.size();
    out.write(reinterpret_cast<const char*>(&len), 8);
    out.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
    detail::append_blobs(out, tensors);
    if (!out) throw std::runtime_error("write failed: " + path.string());
}

inline TensorMap read_tensor_container(const std::filesystem::path& path, std::uint64_t* seed = nullptr) {
    std::ifstream in(path, std::ios::binary | std::ios::ate);
    if (!in) throw std::runtime_error("cannot open: " + path.string());
    const std::size_t total = static_cast<std::size_t>(in.tellg());
    in.seekg(0);
    char magic[8];
    std::uint64_t len = 0;
    if (total < 16) throw std::runtime_error("truncated weight file: " + path.string());
    in.read(magic, 8);
    if (std::memcmp(magic, kWeightMagic, 8) != 0)
        throw std::runtime_error("bad magic in weight file: " + path.string());
    in.read(reinterpret_cast<char*>(&len), 8);
    if (16 + len > total) throw std::runtime_error("truncated weight header: " + path.string());
    std::string header_str(len, '\0');
    in.read(header_str.data(), static_cast<std::streamsize>(len));
    std::vector<char> blob(total - 16 - len);
    in.read(blob.data(), static_cast<std::streamsize>(blob.size()));

    const json header = json::parse(header_str);
    if (seed && header.contains("__meta__")) *seed = header["__meta__"].value("seed", std::uint64_t{0});
    return detail::tensors_from_header(header, blob, path.string());
}

/// Data bundle: one raw blob file plus a JSON sidecar with the same
/// name -> {shape, dtype, offset} schema as the weight header.
inline void write_tensor_bundle(const std::filesystem::path& bin_path,
                                const std::filesystem::path& sidecar_path, const TensorMap& tensors) {
    std::ofstream out(bin_path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open for writing: " + bin_path.string());
    detail::append_blobs(out, tensors);
    if (!out) throw std::runtime_error("write failed: " + bin_path.string());

    std::ofstream side(sidecar_path);
    if (!side) throw std::runtime_error("cannot open for writing: " + sidecar_path.string());
    side << detail::tensor_header(tensors).dump(2) << "\n";
}

inline TensorMap read_tensor_bundle(const std::filesystem::path& bin_path,
                                    const std::filesystem::path& sidecar_path) {
    std::ifstream side(sidecar_path);
    if (!side) throw std::runtime_error("cannot open: " + sidecar_path.string());
    const json header = json::parse(side);

    std::ifstream in(bin_path, std::ios::binary | std::ios::ate);
    if (!in) throw std::runtime_error("cannot open: " + bin_path.string());
    std::vector<char> blob(static_cast<std::size_t>(in.tellg()));
    in.seekg(0);
    in.read(blob.data(), static_cast<std::streamsize>(blob.size()));
    return detail::tensors_from_header(header, blob, bin_path.string());
}

// ---------------------------------------------------------------------------
// weight set (position-encoding MLP + grounding decoder)

struct WeightSet {
    MlpWeights pos_mlp;  // 3 -> d, shared by 3D patches and coordinate tokens
    DecoderWeights decoder;
};

inline WeightSet init_weight_set(const DecoderConfig& cfg, std::uint64_t seed) {
    Rng rng(seed);
    WeightSet ws;
    ws.pos_mlp = MlpWeights::init(3, cfg.dim, cfg.dim, rng);
    ws.decoder = DecoderWeights::init(cfg, rng);
    return ws;
}

inline LocationToken make_loc_token(std::size_t dim, std::uint64_t seed) {
    Rng rng(derive_seed(seed, 0x10c));
    LocationToken loc;
    loc.embedding.resize(dim);
    for (double& v : loc.embedding) v = rng.uniform(-1.0, 1.0);
    return loc;
}

namespace detail {

inline void mlp_to_tensors(const std::string& prefix, const MlpWeights& mlp, TensorMap& out) {
    out[prefix + ".w1"] = tensor_from_matrix(mlp.w1);
    out[prefix + ".b1"] = tensor_from_vector(mlp.b1);
    out[prefix + ".w2"] = tensor_from_matrix(mlp.w2);
    out[prefix + ".b2"] = tensor_from_vector(mlp.b2);
}

inline const Tensor& need(const TensorMap& t, const std::string& name) {
    auto it = t.find(name);
    if (it == t.end()) throw std::runtime_error("missing tensor: " + name);
    return it->second;
}

inline MlpWeights mlp_from_tensors(const std::string& prefix, const TensorMap& t) {
    MlpWeights mlp;
    mlp.w1 = matrix_from_tensor(need(t, prefix + ".w1"));
    mlp.b1 = vector_from_tensor(need(t, prefix + ".b1"));
    mlp.w2 = matrix_from_tensor(need(t, prefix + ".w2"));
    mlp.b2 = vector_from_tensor(need(t, prefix + ".b2"));
    mlp.validate();
    return mlp;
}

}  // namespace detail

inline TensorMap weight_set_to_tensors(const WeightSet& ws) {
    TensorMap t;
    detail::mlp_to_tensors("pos_mlp", ws.pos_mlp, t);
    detail::mlp_to_tensors("query_pos_mlp", ws.decoder.query_pos_mlp, t);
    detail::mlp_to_tensors("rel_pe_mlp", ws.decoder.rel_pe_mlp, t);
    detail::mlp_to_tensors("box_head", ws.decoder.box_head, t);
    t["sigma.w"] = tensor_from_vector(ws.decoder.sigma_w);
    t["sigma.b"] = tensor_from_vector({ws.decoder.sigma_b});
    for (std::size_t l = 0; l < ws.decoder.layers.size(); ++l) {
        const std::string prefix = "layers." + std::to_string(l) + ".";
        t[prefix + "wq"] = tensor_from_matrix(ws.decoder.layers[l].wq);
        t[prefix + "wk"] = tensor_from_matrix(ws.decoder.layers[l].wk);
        t[prefix + "wv"] = tensor_from_matrix(ws.decoder.layers[l].wv);
        t[prefix + "wo"] = tensor_from_matrix(ws.decoder.layers[l].wo);
    }
    return t;
}

inline WeightSet weight_set_from_tensors(const TensorMap& t) {
    WeightSet ws;
    ws.pos_mlp = detail::mlp_from_tensors("pos_mlp", t);
    ws.decoder.query_pos_mlp = detail::mlp_from_tensors("query_pos_mlp", t);
    ws.decoder.rel_pe_mlp = detail::mlp_from_tensors("rel_pe_mlp", t);
    ws.decoder.box_head = detail::mlp_from_tensors("box_head", t);
    ws.decoder.sigma_w = vector_from_tensor(detail::need(t, "sigma.w"));
    ws.decoder.sigma_b = vector_from_tensor(detail::need(t, "sigma.b")).at(0);
    for (std::size_t l = 0;; ++l) {
        const std::string prefix = "layers." + std::to_string(l) + ".";
        if (t.find(prefix + "wq") == t.end()) break;
        AttentionWeights aw;
        aw.wq = matrix_from_tensor(detail::need(t, prefix + "wq"));
        aw.wk = matrix_from_tensor(detail::need(t, prefix + "wk"));
        aw.wv = matrix_from_tensor(detail::need(t, prefix + "wv"));
        aw.wo = matrix_from_tensor(detail::need(t, prefix + "wo"));
        ws.decoder.layers.push_back(std::move(aw));
    }
    return ws;
}

inline void write_weight_file(const std::filesystem::path& path, const WeightSet& ws, std::uint64_t seed) {
    write_tensor_container(path, weight_set_to_tensors(ws), seed);
}

inline WeightSet read_weight_file(const std::filesystem::path& path, std::uint64_t* seed = nullptr) {
    return weight_set_from_tensors(read_tensor_container(path, seed));
}

// ---------------------------------------------------------------------------
// patch / pooled-token bundles

inline void write_patch_bundle(const std::filesystem::path& bin_path, const Patch3DSet& patches) {
    TensorMap t;
    t["features"] = tensor_from_matrix(patches.features);
    t["positions"] = tensor_from_matrix(patches.positions);
    Tensor src;
    src.shape = {patches.source.size(), 3};
    src.data.reserve(patches.source.size() * 3);
    for (const PatchSource& s : patches.source) {
        src.data.push_back(static_cast<float>(s.view));
        src.data.push_back(static_cast<float>(s.row));
        src.data.push_back(static_cast<float>(s.col));
    }
    t["source"] = std::move(src);
    write_tensor_bundle(bin_path, bin_path.string() + ".json", t);
}

inline Patch3DSet read_patch_bundle(const std::filesystem::path& bin_path) {
    const TensorMap t = read_tensor_bundle(bin_path, bin_path.string() + ".json");
    Patch3DSet patches;
    patches.features = matrix_from_tensor(detail::need(t, "features"));
    patches.positions = matrix_from_tensor(detail::need(t, "positions"));
    const Tensor& src = detail::need(t, "source");
    if (src.shape.size() != 2 || src.shape[1] != 3) throw std::runtime_error("bad source tensor shape");
    patches.source.resize(src.shape[0]);
    for (std::size_t i = 0; i < src.shape[0]; ++i) {
        patches.source[i].view = static_cast<std::uint32_t>(src.data[i * 3]);
        patches.source[i].row = static_cast<std::uint32_t>(src.data[i * 3 + 1]);
        patches.source[i].col = static_cast<std::uint32_t>(src.data[i * 3 + 2]);
    }
    return patches;
}

inline void write_pooled_bundle(const std::filesystem::path& bin_path, const PooledTokens& tokens) {
    TensorMap t;
    t["features"] = tensor_from_matrix(tokens.features);
    t["positions"] = tensor_from_matrix(tokens.positions);
    Tensor counts;
    counts.shape = {tokens.counts.size()};
    for (std::uint32_t c : tokens.counts) counts.data.push_back(static_cast<float>(c));
    t["counts"] = std::move(counts);
    write_tensor_bundle(bin_path, bin_path.string() + ".json", t);
}

inline PooledTokens read_pooled_bundle(const std::filesystem::path& bin_path) {
    const TensorMap t = read_tensor_bundle(bin_path, bin_path.string() + ".json");
    PooledTokens tokens;
    tokens.features = matrix_from_tensor(detail::need(t, "features"));
    tokens.positions = matrix_from_tensor(detail::need(t, "positions"));
    for (float c : detail::need(t, "counts").data)
        tokens.counts.push_back(static_cast<std::uint32_t>(c));
    return tokens;
}

// ---------------------------------------------------------------------------
// scene manifest

constexpr const char* kManifestSchema = "voxlift/1";

struct ManifestView {
    int width = 0, height = 0, patch = 14;
    double fx = 0, fy = 0, cx = 0, cy = 0;
    std::array<double, 16> camera_to_world{};
    std::string depth_blob;
    std::string feature_blob;  // empty = absent
    std::size_t feature_dim = 0;
};

struct SceneManifest {
    std::string schema_version = kManifestSchema;
    std::string scene_id;
    std::vector<ManifestView> views;
    GroundTruth gt;
};

inline void write_scene_manifest(const std::filesystem::path& path, const SceneManifest& manifest) {
    json j;
    j["schema_version"] = manifest.schema_version;
    j["scene_id"] = manifest.scene_id;
    j["extrinsics_convention"] = "camera_to_world";
    j["views"] = json::array();
    for (const ManifestView& v : manifest.views) {
        json jv;
        jv["width"] = v.width;
        jv["height"] = v.height;
        jv["patch"] = v.patch;
        jv["intrinsics"] = {{"fx", v.fx}, {"fy", v.fy}, {"cx", v.cx}, {"cy", v.cy}};
        jv["camera_to_world"] = v.camera_to_world;
        jv["depth_blob"] = v.depth_blob;
        if (!v.feature_blob.empty()) {
            jv["feature_blob"] = v.feature_blob;
            jv["feature_dim"] = v.feature_dim;
        }
        j["views"].push_back(std::move(jv));
    }
    j["gt_boxes"] = json::array();
    for (std::size_t i = 0; i < manifest.gt.boxes.size(); ++i) {
        const Box3D& b = manifest.gt.boxes[i];
        j["gt_boxes"].push_back({{"center", b.center}, {"size", b.size}, {"label", manifest.gt.labels[i]}});
    }
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
    out << j.dump(2) << "\n";
}

inline SceneManifest read_scene_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open: " + path.string());
    const json j = json::parse(in);
    SceneManifest manifest;
    manifest.schema_version = j.at("schema_version").get<std::string>();
    if (manifest.schema_version != kManifestSchema)
        throw std::runtime_error("unrecognized schema_version in " + path.string());
    if (j.value("extrinsics_convention", std::string("camera_to_world")) != "camera_to_world")
        throw std::runtime_error("unrecognized extrinsics_convention in " + path.string());
    manifest.scene_id = j.value("scene_id", std::string{});
    for (const json& jv : j.at("views")) {
        ManifestView v;
        v.width = jv.at("width").get<int>();
        v.height = jv.at("height").get<int>();
        v.patch = jv.at("patch").get<int>();
        v.fx = jv.at("intrinsics").at("fx").get<double>();
        v.fy = jv.at("intrinsics").at("fy").get<double>();
        v.cx = jv.at("intrinsics").at("cx").get<double>();
        v.cy = jv.at("intrinsics").at("cy").get<double>();
        const auto c2w = jv.at("camera_to_world").get<std::vector<double>>();
        if (c2w.size() != 16) throw std::runtime_error("camera_to_world must have 16 entries");
        std::copy(c2w.begin(), c2w.end(), v.camera_to_world.begin());
        v.depth_blob = jv.at("depth_blob").get<std::string>();
        if (jv.contains("feature_blob")) {
            v.feature_blob = jv.at("feature_blob").get<std::string>();
            v.feature_dim = jv.at("feature_dim").get<std::size_t>();
        }
        manifest.views.push_back(std::move(v));
    }
    if (j.contains("gt_boxes")) {
        for (const json& jb : j.at("gt_boxes")) {
            Box3D b;
            b.center = jb.at("center").get<Vec3>();
            b.size = jb.at("size").get<Vec3>();
            manifest.gt.boxes.push_back(b);
            manifest.gt.labels.push_back(jb.value("label", 0));
        }
    }
    return manifest;
}

/// Materialize camera views from a manifest, checking that every referenced
/// blob exists and has exactly 4 * (product of declared shape) bytes.
inline std::vector<CameraView> load_views(const SceneManifest& manifest,
                                          const std::filesystem::path& base_dir) {
    std::vector<CameraView> views;
    for (const ManifestView& mv : manifest.views) {
        CameraView view;
        view.intrinsics = {mv.fx, mv.fy, mv.cx, mv.cy, mv.width, mv.height};
        view.extrinsics.camera_to_world = mv.camera_to_world;
        view.patch = mv.patch;

        const std::filesystem::path depth_path = base_dir / mv.depth_blob;
        if (!std::filesystem::exists(depth_path))
            throw std::runtime_error("missing blob: " + depth_path.string());
        view.depth = read_f32_blob(depth_path);
        if (view.depth.size() != static_cast<std::size_t>(mv.width) * mv.height)
            throw std::runtime_error("depth blob size mismatch: " + depth_path.string());

        if (!mv.feature_blob.empty()) {
            const std::filesystem::path feat_path = base_dir / mv.feature_blob;
            if (!std::filesystem::exists(feat_path))
                throw std::runtime_error("missing blob: " + feat_path.string());
            view.feature_dim = mv.feature_dim;
            view.features = read_f32_blob(feat_path);
            const auto [gw, gh] = patch_grid_dims(mv.width, mv.height, mv.patch);
            if (view.features.size() != static_cast<std::size_t>(gw) * gh * mv.feature_dim)
                throw std::runtime_error("feature blob size mismatch: " + feat_path.string());
        }
        view.validate();
        views.push_back(std::move(view));
    }
    return views;
}

/// Write a generated scene as manifest + blobs under out_dir. Blob paths in
/// the manifest are relative to out_dir.
inline SceneManifest write_generated_scene(const std::filesystem::path& out_dir,
                                           const std::string& scene_id, const GeneratedScene& scene) {
    std::filesystem::create_directories(out_dir / scene_id);
    SceneManifest manifest;
    manifest.scene_id = scene_id;
    manifest.gt = scene.gt;

    char name[64];
    for (std::size_t v = 0; v < scene.views.size(); ++v) {
        const CameraView& view = scene.views[v];
        ManifestView mv;
        mv.width = view.intrinsics.width;
        mv.height = view.intrinsics.height;
        mv.patch = view.patch;
        mv.fx = view.intrinsics.fx;
        mv.fy = view.intrinsics.fy;
        mv.cx = view.intrinsics.cx;
        mv.cy = view.intrinsics.cy;
        mv.camera_to_world = view.extrinsics.camera_to_world;

        std::snprintf(name, sizeof(name), "%s/view_%03zu.depth.f32", scene_id.c_str(), v);
        mv.depth_blob = name;
        write_f32_blob(out_dir / mv.depth_blob, view.depth);
        if (view.feature_dim > 0) {
            std::snprintf(name, sizeof(name), "%s/view_%03zu.feat.f32", scene_id.c_str(), v);
            mv.feature_blob = name;
            mv.feature_dim = view.feature_dim;
            write_f32_blob(out_dir / mv.feature_blob, view.features);
        }
        manifest.views.push_back(std::move(mv));
    }
    write_scene_manifest(out_dir / (scene_id + ".json"), manifest);
    return manifest;
}

// ---------------------------------------------------------------------------
// grounding output documents

struct GroundingDoc {
    std::vector<double> scores;
    std::vector<Box3D> boxes;  // final-layer boxes
    std::vector<std::uint32_t> selected;
};

inline void write_grounding_output(const std::filesystem::path& path, const GroundingOutput& out) {
    json j;
    j["scores"] = out.scores;
    j["boxes"] = json::array();
    if (!out.boxes_per_layer.empty()) {
        for (const Box3D& b : out.boxes_per_layer.back())
            j["boxes"].push_back({{"center", b.center}, {"size", b.size}});
    }
    j["selected"] = out.selected;
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot open for writing: " + path.string());
    f << j.dump(2) << "\n";
}

inline GroundingDoc read_grounding_output(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open: " + path.string());
    const json j = json::parse(f);
    GroundingDoc doc;
    doc.scores = j.at("scores").get<std::vector<double>>();
    for (const json& jb : j.at("boxes")) {
        Box3D b;
        b.center = jb.at("center").get<Vec3>();
        b.size = jb.at("size").get<Vec3>();
        doc.boxes.push_back(b);
    }
    doc.selected = j.at("selected").get<std::vector<std::uint32_t>>();
    return doc;
}

// ---------------------------------------------------------------------------
// run configuration

struct RunConfig {
    PoolingStrategy pooling = PoolingStrategy::voxel(0.2);
    std::size_t pool_cap = 3096;
    DecoderConfig decoder;
    double temperature = 0.07;
    bool aux_loss = false;
    double selection_threshold = 0.5;
    std::uint64_t seed = 0;
};

inline RunConfig read_run_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open: " + path.string());
    const json j = json::parse(in);
    RunConfig cfg;
    if (j.contains("pooling")) {
        const json& jp = j.at("pooling");
        const std::string strategy = jp.value("strategy", std::string("voxel"));
        const bool has_size = jp.contains("voxel_size");
        const bool has_count = jp.contains("count");
        if (has_size && has_count)
            throw std::runtime_error("config: exactly one pooling parameterization allowed");
        if (strategy == "voxel") {
            cfg.pooling = PoolingStrategy::voxel(jp.value("voxel_size", 0.2));
        } else if (strategy == "fps") {
            if (!has_count) throw std::runtime_error("config: fps pooling needs count");
            cfg.pooling = PoolingStrategy::fps(jp.at("count").get<std::size_t>(), jp.value("seed", 0));
        } else {
            throw std::runtime_error("config: unknown pooling strategy " + strategy);
        }
        cfg.pool_cap = jp.value("cap", std::size_t{3096});
    }
    if (j.contains("decoder")) {
        const json& jd = j.at("decoder");
        cfg.decoder.layers = jd.value("layers", cfg.decoder.layers);
        cfg.decoder.queries = jd.value("queries", cfg.decoder.queries);
        if (jd.contains("knn_schedule"))
            cfg.decoder.knn_schedule = jd.at("knn_schedule").get<std::vector<std::size_t>>();
        cfg.decoder.dim = jd.value("dim", cfg.decoder.dim);
        cfg.decoder.selection_threshold = jd.value("selection_threshold", cfg.decoder.selection_threshold);
        cfg.decoder.multi_target = jd.value("multi_target", cfg.decoder.multi_target);
        if (cfg.decoder.knn_schedule.size() != cfg.decoder.layers) {
            if (jd.contains("knn_schedule"))
                throw std::runtime_error("config: knn_schedule length must equal layers");
            // default schedule trimmed/extended for nonstandard layer counts
            std::vector<std::size_t> sched;
            for (std::size_t l = 0; l < cfg.decoder.layers; ++l)
                sched.push_back(std::size_t{16} << std::min<std::size_t>(l, 3));
            cfg.decoder.knn_schedule = std::move(sched);
        }
    }
    if (j.contains("objective")) {
        const json& jo = j.at("objective");
        cfg.temperature = jo.value("temperature", cfg.temperature);
        cfg.aux_loss = jo.value("aux_loss", cfg.aux_loss);
        cfg.selection_threshold = jo.value("selection_threshold", cfg.selection_threshold);
    }
    cfg.seed = j.value("seed", cfg.seed);
    return cfg;
}

// ---------------------------------------------------------------------------
// reports

inline std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline std::string eval_report_json(const EvalReport& report) {
    json j;
    j["n_scenes"] = report.n_scenes;
    json acc = json::object();
    for (std::size_t t = 0; t < report.thresholds.size(); ++t) {
        char key[16];
        std::snprintf(key, sizeof(key), "%.2f", report.thresholds[t]);
        acc[key] = report.acc_at[t];
    }
    j["acc_at"] = acc;
    j["per_scene"] = json::array();
    for (const SceneEval& se : report.per_scene) {
        json js;
        js["scene_id"] = se.scene_id;
        js["best_iou"] = se.best_iou;
        js["hits"] = se.hits;
        j["per_scene"].push_back(std::move(js));
    }
    return j.dump(2);
}

inline std::string eval_report_csv(const EvalReport& report) {
    std::string out = "scene_id,best_iou";
    for (double t : report.thresholds) {
        char col[24];
        std::snprintf(col, sizeof(col), ",hit_%03d", static_cast<int>(std::lround(t * 100)));
        out += col;
    }
    out += "\n";
    for (const SceneEval& se : report.per_scene) {
        out += se.scene_id + "," + format_double(se.best_iou);
        for (double h : se.hits) out += "," + format_double(h);
        out += "\n";
    }
    return out;
}

inline std::string trajectory_csv(const std::vector<double>& diou, const std::vector<double>& infonce) {
    std::string out = "step,diou_loss,infonce_loss\n";
    for (std::size_t i = 0; i < diou.size(); ++i)
        out += std::to_string(i) + "," + format_double(diou[i]) + "," + format_double(infonce[i]) + "\n";
    return out;
}

}  // namespace voxlift
