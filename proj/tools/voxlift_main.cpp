// voxlift CLI: synthetic scenes, lifting, pooling, grounding, evaluation,
// gradient checks, box-head training and kernel benchmarks.
//
// Exit codes: 0 success, 2 usage error, 3 data/shape error, 4 numeric failure.

#include <chrono>
#include <cstdlib>
#include <iostream>

#include <CLI11.hpp>

#include "voxlift/voxlift.hpp"

namespace vx = voxlift;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct ExitWith {
    int code;
    std::string message;
};

int effective_threads(int flag_value) {
    if (flag_value > 0) return flag_value;
    if (const char* env = std::getenv("VOXLIFT_THREADS")) {
        const int v = std::atoi(env);
        if (v > 0) return v;
    }
    return 1;
}

std::string scene_name(std::size_t index) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "scene_%04zu", index);
    return buf;
}

// ---------------------------------------------------------------------------

struct SynthArgs {
    std::size_t scenes = 1, views = 32, boxes = 4;
    std::uint64_t seed = 0;
    std::string out;
    int width = 336, height = 336, patch = 14;
    std::size_t dim = 64;
    std::string feature_mode = "box_onehot_plus_noise";
    int threads = 0;
};

void run_synth(const SynthArgs& args) {
    if (args.scenes < 1) throw ExitWith{2, "synth: --scenes must be >= 1"};
    if (args.views < 1) throw ExitWith{2, "synth: --views must be >= 1"};
    if (args.boxes < 1) throw ExitWith{2, "synth: --boxes must be >= 1"};

    vx::FeatureMode mode;
    if (args.feature_mode == "random")
        mode = vx::FeatureMode::kRandom;
    else if (args.feature_mode == "box_onehot_plus_noise")
        mode = vx::FeatureMode::kBoxOnehotPlusNoise;
    else
        throw ExitWith{2, "synth: unknown feature mode " + args.feature_mode};

    fs::create_directories(args.out);
    const int threads = effective_threads(args.threads);
    for (std::size_t s = 0; s < args.scenes; ++s) {
        vx::SceneSpec spec;
        spec.seed = vx::derive_seed(args.seed, s);
        spec.n_boxes = args.boxes;
        spec.n_views = args.views;
        spec.width = args.width;
        spec.height = args.height;
        spec.patch = args.patch;
        spec.feature_dim = args.dim;
        spec.feature_mode = mode;

        const vx::GeneratedScene scene = vx::generate(spec, threads);
        const std::string id = scene_name(s);
        vx::write_generated_scene(args.out, id, scene);

        const auto [gw, gh] = vx::patch_grid_dims(args.width, args.height, args.patch);
        json summary;
        summary["scene_id"] = id;
        summary["views"] = args.views;
        summary["boxes"] = args.boxes;
        summary["tokens_per_view"] = gw * gh;
        summary["manifest"] = (fs::path(args.out) / (id + ".json")).string();
        std::cout << summary.dump() << "\n";
    }
}

// ---------------------------------------------------------------------------

struct InitWeightsArgs {
    std::string config;
    std::uint64_t seed = 0;
    bool seed_given = false;
    std::string out;
    std::string loc_out;
    std::size_t dim = 0, layers = 0;
};

void run_init_weights(const InitWeightsArgs& args) {
    vx::RunConfig cfg;
    if (!args.config.empty()) cfg = vx::read_run_config(args.config);
    const std::uint64_t seed = args.seed_given || args.config.empty() ? args.seed : cfg.seed;
    if (args.dim > 0) cfg.decoder.dim = args.dim;
    if (args.layers > 0) {
        cfg.decoder.layers = args.layers;
        cfg.decoder.knn_schedule.resize(args.layers);
        for (std::size_t l = 0; l < args.layers; ++l)
            cfg.decoder.knn_schedule[l] = std::size_t{16} << std::min<std::size_t>(l, 3);
    }
    cfg.decoder.validate();
    const vx::WeightSet ws = vx::init_weight_set(cfg.decoder, seed);
    vx::write_weight_file(args.out, ws, seed);
    if (!args.loc_out.empty()) {
        const vx::LocationToken loc = vx::make_loc_token(cfg.decoder.dim, seed);
        std::vector<float> blob(loc.embedding.begin(), loc.embedding.end());
        vx::write_f32_blob(args.loc_out, blob);
    }
    json summary;
    summary["weights"] = args.out;
    summary["dim"] = cfg.decoder.dim;
    summary["layers"] = cfg.decoder.layers;
    summary["seed"] = seed;
    std::cout << summary.dump() << "\n";
}

// ---------------------------------------------------------------------------

struct LiftArgs {
    std::string scene, weights, out;
    int threads = 0;
};

void run_lift(const LiftArgs& args) {
    const vx::SceneManifest manifest = vx::read_scene_manifest(args.scene);
    const std::vector<vx::CameraView> views =
        vx::load_views(manifest, fs::path(args.scene).parent_path());
    const vx::WeightSet ws = vx::read_weight_file(args.weights);
    const vx::Patch3DSet patches = vx::lift_scene(views, ws.pos_mlp, effective_threads(args.threads));
    vx::write_patch_bundle(args.out, patches);
    json summary;
    summary["tokens"] = patches.size();
    summary["dim"] = patches.features.cols();
    std::cout << summary.dump() << "\n";
}

// ---------------------------------------------------------------------------

struct PoolArgs {
    std::string in, strategy = "voxel", out;
    double voxel_size = 0.2;
    std::size_t count = 0;
    std::size_t seed = 0;
    std::size_t cap = 3096;
};

void run_pool(const PoolArgs& args) {
    const vx::Patch3DSet patches = vx::read_patch_bundle(args.in);
    vx::PoolingStrategy strategy;
    if (args.strategy == "voxel") {
        strategy = vx::PoolingStrategy::voxel(args.voxel_size);
    } else if (args.strategy == "fps") {
        if (args.count == 0) throw ExitWith{2, "pool: --count is required for fps"};
        strategy = vx::PoolingStrategy::fps(args.count, args.seed);
    } else {
        throw ExitWith{2, "pool: unknown strategy " + args.strategy};
    }
    const vx::PooledTokens pooled = vx::pool_with_strategy(patches, strategy, args.cap);
    vx::write_pooled_bundle(args.out, pooled);
    std::cout << pooled.size() << "\n";
}

// ---------------------------------------------------------------------------

struct GroundArgs {
    std::string scene, config, weights, loc, out;
    int threads = 0;
};

void run_ground(const GroundArgs& args) {
    const vx::SceneManifest manifest = vx::read_scene_manifest(args.scene);
    const std::vector<vx::CameraView> views =
        vx::load_views(manifest, fs::path(args.scene).parent_path());
    vx::RunConfig cfg;
    if (!args.config.empty()) cfg = vx::read_run_config(args.config);
    const vx::WeightSet ws = vx::read_weight_file(args.weights);

    const std::vector<float> loc_blob = vx::read_f32_blob(args.loc);
    if (loc_blob.size() != cfg.decoder.dim)
        throw std::runtime_error("loc blob dimension does not match decoder dim");
    vx::LocationToken loc;
    loc.embedding.assign(loc_blob.begin(), loc_blob.end());

    const vx::PipelineResult result =
        vx::run_grounding_pipeline(views, ws, loc, cfg, effective_threads(args.threads));
    vx::write_grounding_output(args.out, result.output);

    json summary;
    summary["tokens"] = result.patches.size();
    summary["pooled"] = result.pooled.size();
    summary["queries"] = result.output.scores.size();
    summary["selected"] = result.output.selected;
    std::cout << summary.dump() << "\n";
}

// ---------------------------------------------------------------------------

struct EvalArgs {
    std::string pred, gt, iou = "0.25,0.5";
    std::string csv;
    bool multi = false;
};

void run_eval(const EvalArgs& args) {
    std::vector<double> thresholds;
    std::stringstream ss(args.iou);
    std::string item;
    while (std::getline(ss, item, ',')) thresholds.push_back(std::stod(item));
    if (thresholds.empty()) throw ExitWith{2, "eval: --iou needs at least one threshold"};

    const vx::GroundingDoc doc = vx::read_grounding_output(args.pred);
    const vx::SceneManifest manifest = vx::read_scene_manifest(args.gt);

    std::vector<vx::Box3D> selected;
    for (std::uint32_t i : doc.selected) {
        if (i >= doc.boxes.size()) throw std::runtime_error("selected index out of range in prediction");
        selected.push_back(doc.boxes[i]);
    }
    const vx::EvalReport report = vx::acc_at_iou({selected}, {manifest.gt.boxes}, thresholds,
                                                 {manifest.scene_id}, args.multi);
    std::cout << vx::eval_report_json(report) << "\n";
    if (!args.csv.empty()) {
        std::ofstream f(args.csv);
        f << vx::eval_report_csv(report);
    }
}

// ---------------------------------------------------------------------------

struct GradcheckArgs {
    std::string op;
    std::size_t trials = 100;
    double tol = 1e-4;
    std::uint64_t seed = 0;
};

double rel_err(const std::vector<double>& a, const std::vector<double>& b) {
    double num = 0.0, da = 0.0, db = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        num += (a[i] - b[i]) * (a[i] - b[i]);
        da += a[i] * a[i];
        db += b[i] * b[i];
    }
    const double denom = std::sqrt(da) + std::sqrt(db);
    // both-in-noise counts as agreement: saturated objectives leave the true
    // gradient below finite-difference resolution
    if (std::sqrt(num) < 1e-8 || denom < 1e-12) return 0.0;
    return std::sqrt(num) / denom;
}

vx::Box3D random_box(vx::Rng& rng) {
    vx::Box3D b;
    for (int a = 0; a < 3; ++a) {
        b.center[a] = rng.uniform(-2.0, 2.0);
        b.size[a] = rng.uniform(0.2, 2.0);
    }
    return b;
}

// boxes whose faces come within `margin` of each other sit near a kink of the
// loss; gradcheck stays away from those
bool near_kink(const vx::Box3D& p, const vx::Box3D& g, double margin) {
    for (int a = 0; a < 3; ++a) {
        if (std::abs(p.min(a) - g.min(a)) < margin) return true;
        if (std::abs(p.max(a) - g.max(a)) < margin) return true;
        if (std::abs(std::min(p.max(a), g.max(a)) - std::max(p.min(a), g.min(a))) < margin) return true;
    }
    return false;
}

double gradcheck_diou(vx::Rng& rng) {
    vx::Box3D pred, gt;
    do {
        pred = random_box(rng);
        gt = random_box(rng);
    } while (near_kink(pred, gt, 1e-3));

    const vx::DiouResult res = vx::diou_loss(pred, gt);
    const double h = 1e-5;
    std::vector<double> fd(6), an(res.grad.begin(), res.grad.end());
    for (int p = 0; p < 6; ++p) {
        vx::Box3D plus = pred, minus = pred;
        double& vp = p < 3 ? plus.center[p] : plus.size[p - 3];
        double& vm = p < 3 ? minus.center[p] : minus.size[p - 3];
        vp += h;
        vm -= h;
        fd[p] = (vx::diou_loss(plus, gt).loss - vx::diou_loss(minus, gt).loss) / (2 * h);
    }
    return rel_err(an, fd);
}

double gradcheck_infonce(vx::Rng& rng) {
    const std::size_t n = 2 + rng.next_below(7);
    const std::size_t c = 2 + rng.next_below(15);
    vx::Matrix q(n, c);
    std::vector<double> loc(c);
    for (double& v : q.data()) v = rng.uniform(-1.0, 1.0);
    for (double& v : loc) v = rng.uniform(-1.0, 1.0);
    const std::size_t positive = rng.next_below(n);
    const double temperature = 0.07;

    const vx::InfoNceResult res = vx::info_nce(q, loc, positive, temperature);
    const double h = 1e-6;
    std::vector<double> an, fd;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t t = 0; t < c; ++t) {
            an.push_back(res.grad_queries(i, t));
            vx::Matrix qp = q, qm = q;
            qp(i, t) += h;
            qm(i, t) -= h;
            fd.push_back((vx::info_nce(qp, loc, positive, temperature).loss -
                          vx::info_nce(qm, loc, positive, temperature).loss) /
                         (2 * h));
        }
    for (std::size_t t = 0; t < c; ++t) {
        an.push_back(res.grad_loc[t]);
        std::vector<double> lp = loc, lm = loc;
        lp[t] += h;
        lm[t] -= h;
        fd.push_back((vx::info_nce(q, lp, positive, temperature).loss -
                      vx::info_nce(q, lm, positive, temperature).loss) /
                     (2 * h));
    }
    return rel_err(an, fd);
}

double gradcheck_boxhead(vx::Rng& rng) {
    const std::size_t n = 6, c = 8, hid = 8;
    vx::TrainScene scene;
    vx::Matrix values(n, c);
    scene.positions = vx::Matrix(n, 3);
    for (double& v : values.data()) v = rng.uniform(-1.0, 1.0);
    for (double& v : scene.positions.data()) v = rng.uniform(-1.5, 1.5);
    scene.values_per_layer.push_back(values);
    scene.gt_boxes = {random_box(rng), random_box(rng)};

    vx::MlpWeights head;
    {
        vx::Rng wrng(rng.next_u64());
        head = vx::MlpWeights::init(c, hid, 6, wrng);
    }
    const vx::LossReport report = vx::box_head_loss({scene}, head);

    std::vector<double> an, fd;
    const double h = 1e-6;
    auto probe = [&](double* param, double analytic) {
        an.push_back(analytic);
        const double keep = *param;
        *param = keep + h;
        const double lp = vx::box_head_loss({scene}, head).diou_loss;
        *param = keep - h;
        const double lm = vx::box_head_loss({scene}, head).diou_loss;
        *param = keep;
        fd.push_back((lp - lm) / (2 * h));
    };
    for (std::size_t i = 0; i < head.w1.size(); ++i)
        probe(&head.w1.data()[i], report.box_head_grad.w1.data()[i]);
    for (std::size_t i = 0; i < head.b1.size(); ++i) probe(&head.b1[i], report.box_head_grad.b1[i]);
    for (std::size_t i = 0; i < head.w2.size(); ++i)
        probe(&head.w2.data()[i], report.box_head_grad.w2.data()[i]);
    for (std::size_t i = 0; i < head.b2.size(); ++i) probe(&head.b2[i], report.box_head_grad.b2[i]);
    return rel_err(an, fd);
}

void run_gradcheck(const GradcheckArgs& args) {
    if (args.trials < 1) throw ExitWith{2, "gradcheck: --trials must be >= 1"};
    vx::Rng rng(vx::derive_seed(args.seed, 0xf1d));
    double max_err = 0.0;
    for (std::size_t t = 0; t < args.trials; ++t) {
        double err = 0.0;
        if (args.op == "diou")
            err = gradcheck_diou(rng);
        else if (args.op == "infonce")
            err = gradcheck_infonce(rng);
        else if (args.op == "boxhead")
            err = gradcheck_boxhead(rng);
        else
            throw ExitWith{2, "gradcheck: unknown op " + args.op};
        max_err = std::max(max_err, err);
    }
    json summary;
    summary["op"] = args.op;
    summary["trials"] = args.trials;
    summary["max_rel_err"] = max_err;
    summary["tol"] = args.tol;
    summary["pass"] = max_err < args.tol;
    std::cout << summary.dump() << "\n";
    if (!(max_err < args.tol)) throw ExitWith{4, "gradcheck: max relative error above tolerance"};
}

// ---------------------------------------------------------------------------

struct TrainArgs {
    std::string scenes_dir;
    std::size_t steps = 500;
    double lr = 0.1;
    std::string config, weights, loc;
    std::string out = "trajectory.csv";
    std::uint64_t seed = 0;
    bool seed_given = false;
    int threads = 0;
};

void run_train_boxhead(const TrainArgs& args) {
    if (args.steps < 1) throw ExitWith{2, "train-boxhead: --steps must be >= 1"};
    if (!(args.lr >= 0.0)) throw ExitWith{2, "train-boxhead: --lr must be >= 0"};

    vx::RunConfig cfg;
    if (!args.config.empty()) cfg = vx::read_run_config(args.config);
    const std::uint64_t seed = args.seed_given || args.config.empty() ? args.seed : cfg.seed;

    vx::WeightSet ws = args.weights.empty() ? vx::init_weight_set(cfg.decoder, seed)
                                            : vx::read_weight_file(args.weights);
    vx::LocationToken loc;
    if (args.loc.empty()) {
        loc = vx::make_loc_token(cfg.decoder.dim, seed);
    } else {
        const std::vector<float> blob = vx::read_f32_blob(args.loc);
        loc.embedding.assign(blob.begin(), blob.end());
    }

    std::vector<fs::path> manifests;
    for (const auto& entry : fs::directory_iterator(args.scenes_dir))
        if (entry.is_regular_file() && entry.path().extension() == ".json")
            manifests.push_back(entry.path());
    std::sort(manifests.begin(), manifests.end());
    if (manifests.empty()) throw std::runtime_error("no scene manifests in " + args.scenes_dir);

    const int threads = effective_threads(args.threads);
    std::vector<vx::TrainScene> scenes;
    for (const fs::path& mp : manifests) {
        const vx::SceneManifest manifest = vx::read_scene_manifest(mp);
        const std::vector<vx::CameraView> views = vx::load_views(manifest, mp.parent_path());
        scenes.push_back(vx::make_train_scene(views, ws, loc, cfg, manifest.gt, threads));
    }

    vx::TrainOptions opts;
    opts.temperature = cfg.temperature;
    opts.aux_loss = cfg.aux_loss;
    const vx::TrainResult result = vx::train_box_head(scenes, ws.decoder.box_head, args.steps, args.lr, opts);

    std::ofstream csv(args.out);
    if (!csv) throw std::runtime_error("cannot open for writing: " + args.out);
    csv << vx::trajectory_csv(result.diou_losses, result.infonce_losses);

    json summary;
    summary["scenes"] = scenes.size();
    summary["steps"] = result.diou_losses.size();
    if (!result.diou_losses.empty()) {
        summary["initial_diou"] = result.diou_losses.front();
        summary["final_diou"] = result.diou_losses.back();
    }
    summary["csv"] = args.out;
    std::cout << summary.dump() << "\n";
    if (result.diverged)
        throw ExitWith{4, "train-boxhead: loss diverged at step " + std::to_string(result.diverged_step)};
}

// ---------------------------------------------------------------------------

struct BenchArgs {
    std::size_t views = 8, patches_per_view = 576, repeat = 3;
    std::size_t dim = 64;
    int threads = 0;
};

void run_bench(const BenchArgs& args) {
    if (args.views < 1 || args.patches_per_view < 1 || args.repeat < 1)
        throw ExitWith{2, "bench: all parameters must be >= 1"};
    const int side = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(args.patches_per_view))));

    vx::SceneSpec spec;
    spec.seed = 0;
    spec.n_views = args.views;
    spec.patch = 14;
    spec.width = spec.height = side * spec.patch;
    spec.feature_dim = args.dim;
    const int threads = effective_threads(args.threads);
    const vx::GeneratedScene scene = vx::generate(spec, threads);

    vx::RunConfig cfg;
    cfg.decoder.dim = args.dim;
    const vx::WeightSet ws = vx::init_weight_set(cfg.decoder, 0);
    const vx::LocationToken loc = vx::make_loc_token(args.dim, 0);

    using clock = std::chrono::steady_clock;
    double lift_s = 0.0, pool_s = 0.0, decode_s = 0.0;
    for (std::size_t r = 0; r < args.repeat; ++r) {
        auto t0 = clock::now();
        const vx::Patch3DSet patches = vx::lift_scene(scene.views, ws.pos_mlp, threads);
        auto t1 = clock::now();
        const vx::PooledTokens pooled = vx::pool_with_strategy(patches, cfg.pooling, cfg.pool_cap);
        auto t2 = clock::now();
        vx::grounding_forward(pooled.features, pooled.positions, loc, cfg.decoder, ws.decoder, threads);
        auto t3 = clock::now();
        lift_s += std::chrono::duration<double>(t1 - t0).count();
        pool_s += std::chrono::duration<double>(t2 - t1).count();
        decode_s += std::chrono::duration<double>(t3 - t2).count();
    }
    json summary;
    summary["views"] = args.views;
    summary["patches_per_view"] = static_cast<std::size_t>(side) * side;
    summary["repeat"] = args.repeat;
    summary["lift_s"] = lift_s / static_cast<double>(args.repeat);
    summary["pool_s"] = pool_s / static_cast<double>(args.repeat);
    summary["decode_s"] = decode_s / static_cast<double>(args.repeat);
    std::cout << summary.dump() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"voxlift: multi-view RGB-D lifting, token pooling and 3D grounding"};
    app.require_subcommand(1);

    SynthArgs synth;
    CLI::App* synth_cmd = app.add_subcommand("synth", "generate synthetic RGB-D scenes");
    synth_cmd->add_option("--scenes", synth.scenes, "number of scenes");
    synth_cmd->add_option("--views", synth.views, "views per scene");
    synth_cmd->add_option("--boxes", synth.boxes, "boxes per scene");
    synth_cmd->add_option("--seed", synth.seed, "rng seed");
    synth_cmd->add_option("--out", synth.out, "output directory")->required();
    synth_cmd->add_option("--width", synth.width, "image width");
    synth_cmd->add_option("--height", synth.height, "image height");
    synth_cmd->add_option("--patch", synth.patch, "patch size");
    synth_cmd->add_option("--dim", synth.dim, "feature dimension");
    synth_cmd->add_option("--feature-mode", synth.feature_mode, "random | box_onehot_plus_noise");
    synth_cmd->add_option("--threads", synth.threads, "worker cap (0 = VOXLIFT_THREADS or 1)");

    InitWeightsArgs initw;
    CLI::App* initw_cmd = app.add_subcommand("init-weights", "create a seeded weight file");
    initw_cmd->add_option("--config", initw.config, "run config JSON");
    initw_cmd->add_option("--seed", initw.seed, "rng seed");
    initw_cmd->add_option("--out", initw.out, "weight file path")->required();
    initw_cmd->add_option("--loc-out", initw.loc_out, "also write a loc-token blob here");
    initw_cmd->add_option("--dim", initw.dim, "override embedding dim");
    initw_cmd->add_option("--layers", initw.layers, "override decoder layer count");

    LiftArgs lift;
    CLI::App* lift_cmd = app.add_subcommand("lift", "lift a scene into 3D patches");
    lift_cmd->add_option("--scene", lift.scene, "scene manifest")->required();
    lift_cmd->add_option("--weights", lift.weights, "weight file")->required();
    lift_cmd->add_option("--out", lift.out, "output bundle path")->required();
    lift_cmd->add_option("--threads", lift.threads, "worker cap");

    PoolArgs pool;
    CLI::App* pool_cmd = app.add_subcommand("pool", "compress a 3D patch bundle");
    pool_cmd->add_option("--in", pool.in, "patch bundle")->required();
    pool_cmd->add_option("--strategy", pool.strategy, "voxel | fps");
    pool_cmd->add_option("--voxel-size", pool.voxel_size, "voxel edge (meters)");
    pool_cmd->add_option("--count", pool.count, "fps token count");
    pool_cmd->add_option("--seed", pool.seed, "fps seed index");
    pool_cmd->add_option("--cap", pool.cap, "post-pool token cap");
    pool_cmd->add_option("--out", pool.out, "output bundle path")->required();

    GroundArgs ground;
    CLI::App* ground_cmd = app.add_subcommand("ground", "run lift -> pool -> grounding decoder");
    ground_cmd->add_option("--scene", ground.scene, "scene manifest")->required();
    ground_cmd->add_option("--config", ground.config, "run config JSON");
    ground_cmd->add_option("--weights", ground.weights, "weight file")->required();
    ground_cmd->add_option("--loc", ground.loc, "loc token blob")->required();
    ground_cmd->add_option("--out", ground.out, "output JSON")->required();
    ground_cmd->add_option("--threads", ground.threads, "worker cap");

    EvalArgs eval;
    CLI::App* eval_cmd = app.add_subcommand("eval", "score predictions against ground truth");
    eval_cmd->add_option("--pred", eval.pred, "grounding output JSON")->required();
    eval_cmd->add_option("--gt", eval.gt, "scene manifest")->required();
    eval_cmd->add_option("--iou", eval.iou, "comma-separated IoU thresholds");
    eval_cmd->add_option("--csv", eval.csv, "also write per-scene CSV here");
    eval_cmd->add_flag("--multi", eval.multi, "multi-target scoring");

    GradcheckArgs grad;
    CLI::App* grad_cmd = app.add_subcommand("gradcheck", "analytic vs finite-difference gradients");
    grad_cmd->add_option("--op", grad.op, "diou | infonce | boxhead")->required();
    grad_cmd->add_option("--trials", grad.trials, "trial count");
    grad_cmd->add_option("--tol", grad.tol, "max relative error");
    grad_cmd->add_option("--seed", grad.seed, "rng seed");

    TrainArgs train;
    CLI::App* train_cmd = app.add_subcommand("train-boxhead", "gradient descent on the box head");
    train_cmd->add_option("--scenes", train.scenes_dir, "directory of scene manifests")->required();
    train_cmd->add_option("--steps", train.steps, "gradient steps");
    train_cmd->add_option("--lr", train.lr, "learning rate");
    train_cmd->add_option("--config", train.config, "run config JSON");
    train_cmd->add_option("--weights", train.weights, "weight file (default: init from seed)");
    train_cmd->add_option("--loc", train.loc, "loc token blob (default: from seed)");
    train_cmd->add_option("--out", train.out, "trajectory CSV path");
    train_cmd->add_option("--seed", train.seed, "rng seed");
    train_cmd->add_option("--threads", train.threads, "worker cap");

    BenchArgs bench;
    CLI::App* bench_cmd = app.add_subcommand("bench", "time the lift/pool/decode kernels");
    bench_cmd->add_option("--views", bench.views, "view count");
    bench_cmd->add_option("--patches-per-view", bench.patches_per_view, "approximate patches per view");
    bench_cmd->add_option("--repeat", bench.repeat, "repetitions");
    bench_cmd->add_option("--dim", bench.dim, "feature dimension");
    bench_cmd->add_option("--threads", bench.threads, "worker cap");

    try {
        app.parse(argc, argv);
        initw.seed_given = initw_cmd->count("--seed") > 0;
        train.seed_given = train_cmd->count("--seed") > 0;
        if (synth_cmd->parsed()) run_synth(synth);
        if (initw_cmd->parsed()) run_init_weights(initw);
        if (lift_cmd->parsed()) run_lift(lift);
        if (pool_cmd->parsed()) run_pool(pool);
        if (ground_cmd->parsed()) run_ground(ground);
        if (eval_cmd->parsed()) run_eval(eval);
        if (grad_cmd->parsed()) run_gradcheck(grad);
        if (train_cmd->parsed()) run_train_boxhead(train);
        if (bench_cmd->parsed()) run_bench(bench);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    } catch (const ExitWith& e) {
        if (!e.message.empty()) std::cerr << e.message << "\n";
        return e.code;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
    return 0;
}
