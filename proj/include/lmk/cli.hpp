#pragma once

// Command-line front end. run_cli() is the whole program minus main(), so tests can
// drive it with argument vectors and captured streams.
//
// Exit codes: 0 success, 1 verification/eval failure, 2 usage error, 3 I/O or format error.

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "lmk/config.hpp"
#include "lmk/data.hpp"
#include "lmk/error.hpp"
#include "lmk/image.hpp"
#include "lmk/losses.hpp"
#include "lmk/model.hpp"
#include "lmk/profiler.hpp"
#include "lmk/train.hpp"
#include "lmk/verify.hpp"
#include "lmk/weights.hpp"

namespace lmk {

inline constexpr const char* kToolkitVersion = "0.1.0";
inline constexpr const char* kConfigEnv = "LMK_CONFIG";
inline constexpr const char* kDefaultManifest = "lmk_manifest.json";

enum ExitCode : int { kExitOk = 0, kExitFailure = 1, kExitUsage = 2, kExitIo = 3 };

/// Everything needed to re-run an invocation: the subcommand arguments (without the
/// manifest/config flags) and the fully resolved model configuration.
struct RunManifest {
    std::string subcommand;
    std::vector<std::string> args;
    ModelConfig config;
    nlohmann::json seeds = nlohmann::json::object();
    std::vector<std::string> inputs;
    std::vector<std::string> outputs;
    std::string version = kToolkitVersion;
    double wall_time_s = 0;
    int exit_code = 0;
};

inline void to_json(nlohmann::json& j, const RunManifest& m) {
    j = {{"subcommand", m.subcommand}, {"args", m.args},       {"config", m.config},
         {"seeds", m.seeds},           {"inputs", m.inputs},   {"outputs", m.outputs},
         {"version", m.version},       {"wall_time_s", m.wall_time_s}, {"exit_code", m.exit_code}};
}

inline void from_json(const nlohmann::json& j, RunManifest& m) {
    j.at("subcommand").get_to(m.subcommand);
    j.at("args").get_to(m.args);
    m.config = j.at("config").get<ModelConfig>();
    m.seeds = j.value("seeds", nlohmann::json::object());
    m.inputs = j.value("inputs", std::vector<std::string>{});
    m.outputs = j.value("outputs", std::vector<std::string>{});
    m.version = j.value("version", std::string{});
    m.wall_time_s = j.value("wall_time_s", 0.0);
    m.exit_code = j.value("exit_code", 0);
}

/// Writes `text` to `path` through a temporary file and a rename.
inline void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw IoError("cannot write " + tmp.string());
        out << text;
        if (!out) throw IoError("write failed for " + tmp.string());
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw IoError("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

inline RunManifest read_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open manifest " + path.string());
    try {
        return nlohmann::json::parse(in).get<RunManifest>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("manifest " + path.string() + ": " + e.what());
    }
}

/// "index x y" per landmark, 6 significant digits.
inline std::string format_landmarks(const LandmarkSet& lms) {
    std::string out;
    char line[96];
    for (std::size_t i = 0; i < lms.size(); ++i) {
        std::snprintf(line, sizeof line, "%zu %.6g %.6g\n", i, static_cast<double>(lms.points[i].x),
                      static_cast<double>(lms.points[i].y));
        out += line;
    }
    return out;
}

inline BBox parse_bbox(const std::string& text) {
    BBox b;
    char tail = 0;
    if (std::sscanf(text.c_str(), "%f,%f,%f,%f%c", &b.x, &b.y, &b.w, &b.h, &tail) != 4)
        throw ArgumentError("--bbox expects x,y,w,h, got '" + text + "'");
    if (!(b.w > 0 && b.h > 0)) throw ArgumentError("--bbox needs positive width and height");
    return b;
}

/// bbox_diag | interocular:i,j | const:c
inline NmeNorm parse_norm(const std::string& text) {
    if (text == "bbox_diag") return NmeNorm::bbox_diag();
    std::size_t i = 0, j = 0;
    float c = 0;
    char tail = 0;
    if (std::sscanf(text.c_str(), "interocular:%zu,%zu%c", &i, &j, &tail) == 2) return NmeNorm::interocular(i, j);
    if (std::sscanf(text.c_str(), "const:%f%c", &c, &tail) == 1 && c > 0) return NmeNorm::constant(c);
    throw ArgumentError("--norm expects bbox_diag, interocular:i,j or const:c, got '" + text + "'");
}

namespace cli_detail {

struct Context {
    ModelConfig config;
    std::size_t threads = 1;
    std::ostream& out;
    std::ostream& err;
    RunManifest manifest;
};

inline WeightStore load_checked_weights(const std::string& path, const ModelConfig& cfg) {
    WeightStore w = load(path);
    const ValidationReport report = validate_against_config(w, cfg);
    if (!report.ok()) throw FormatError("weights " + path + " do not match the config:\n" + report.describe());
    return w;
}

/// Crop, predict and map back to source coordinates (unless crop_space).
inline LandmarkSet infer_one(const Tensor& image, const BBox& bbox, const WeightStore& w, const ModelConfig& cfg,
                             bool crop_space) {
    const CropResult crop = crop_resize(image, bbox, {}, cfg.input_size);
    const LandmarkSet lms = predict(crop.image, w, cfg);
    return crop_space ? lms : transform(lms, crop.inverse);
}

inline void write_or_print(Context& ctx, const std::string& path, const std::string& text) {
    if (path.empty()) {
        ctx.out << text;
    } else {
        write_text_atomic(path, text);
        ctx.manifest.outputs.push_back(path);
    }
}

inline void draw_markers(Tensor& image, const LandmarkSet& lms) {
    const std::size_t h = image.dim(1), w = image.dim(2);
    auto v = image.mutable_values();
    for (const auto& p : lms.points) {
        const long cx = static_cast<long>(std::floor(p.x)), cy = static_cast<long>(std::floor(p.y));
        for (long y = cy - 1; y <= cy + 1; ++y)
            for (long x = cx - 1; x <= cx + 1; ++x) {
                if (x < 0 || y < 0 || x >= static_cast<long>(w) || y >= static_cast<long>(h)) continue;
                const std::size_t k = static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x);
                v[k] = 1.0f;
                v[h * w + k] = 0.0f;
                v[2 * h * w + k] = 0.0f;
            }
    }
}

} // namespace cli_detail

/// Runs one invocation. `config_override` pins the model config (manifest replay).
inline int run_cli(const std::vector<std::string>& argv, std::ostream& out = std::cout, std::ostream& err = std::cerr,
                   const std::optional<ModelConfig>& config_override = std::nullopt);

namespace cli_detail {

inline int replay(const std::string& path, const std::string& manifest_out, std::ostream& out, std::ostream& err) {
    const RunManifest m = read_manifest(path);
    std::vector<std::string> args{"lmk", "--manifest", manifest_out};
    args.insert(args.end(), m.args.begin(), m.args.end());
    return run_cli(args, out, err, m.config);
}

/// Drops the flags that do not belong in a replayable argument list.
inline std::vector<std::string> replayable_args(const std::vector<std::string>& argv) {
    std::vector<std::string> keep;
    for (std::size_t i = 1; i < argv.size(); ++i) {
        const std::string& a = argv[i];
        if (a == "--manifest" || a == "--config") {
            ++i;
            continue;
        }
        if (a.rfind("--manifest=", 0) == 0 || a.rfind("--config=", 0) == 0) continue;
        keep.push_back(a);
    }
    return keep;
}

} // namespace cli_detail

inline int run_cli(const std::vector<std::string>& argv, std::ostream& out, std::ostream& err,
                   const std::optional<ModelConfig>& config_override) {
    using namespace cli_detail;
    const auto started = std::chrono::steady_clock::now();

    CLI::App app{"Facial landmark toolkit", "lmk"};
    app.require_subcommand(1);
    std::string config_path, manifest_path = kDefaultManifest;
    std::size_t threads = 1;
    app.add_option("--config", config_path, "Model config JSON (default: $LMK_CONFIG, else built-in)");
    app.add_option("--manifest", manifest_path, "Where to write the run manifest")->capture_default_str();
    app.add_option("--threads", threads, "Worker threads for eval")->check(CLI::Range(1, 256))->capture_default_str();

    // infer
    auto* infer = app.add_subcommand("infer", "Predict landmarks for one image");
    std::string weights_path, image_path, bbox_text, out_path;
    bool crop_space = false;
    infer->add_option("--weights", weights_path, ".lmkw weights")->required();
    infer->add_option("--image", image_path, "PPM/PGM image")->required();
    infer->add_option("--bbox", bbox_text, "Face box x,y,w,h in source pixels")->required();
    infer->add_option("--out", out_path, "Landmark file (default: stdout)");
    infer->add_flag("--crop-space", crop_space, "Report coordinates in the resized crop");

    // eval
    auto* eval = app.add_subcommand("eval", "Mean NME over an annotation file");
    std::string annotations, norm_text = "bbox_diag";
    std::optional<double> max_nme;
    eval->add_option("--weights", weights_path, ".lmkw weights")->required();
    eval->add_option("--annotations", annotations, "JSON-lines annotation file")->required();
    eval->add_option("--norm", norm_text, "bbox_diag | interocular:i,j | const:c")->capture_default_str();
    eval->add_option("--max-nme", max_nme, "Fail (exit 1) if mean NME exceeds this percentage");

    // verify
    auto* verify = app.add_subcommand("verify", "Run self-check suites");
    std::string suite = "all";
    std::size_t trials = 100;
    std::uint64_t seed = 1;
    verify->add_option("suite", suite, "patch-ops | gradients | softargmax | weights-io | all")
        ->check(CLI::IsMember({"patch-ops", "gradients", "softargmax", "weights-io", "all"}))
        ->capture_default_str();
    verify->add_option("--trials", trials, "Randomized trials per suite")->check(CLI::Range(1, 1000000))
        ->capture_default_str();
    verify->add_option("--seed", seed, "Base seed")->capture_default_str();

    // profile
    auto* prof = app.add_subcommand("profile", "Static parameter and MAC count");
    std::optional<float> alpha;
    std::string json_path;
    prof->add_option("--alpha", alpha, "Width multiplier (default: from config)");
    prof->add_option("--json", json_path, "Also write the per-layer report as JSON");

    // distill-toy
    auto* distill = app.add_subcommand("distill-toy", "Desk-scale distillation of the generator head");
    std::size_t steps = 200;
    std::uint64_t distill_seed = 42;
    distill->add_option("--steps", steps, "Optimizer steps")->capture_default_str();
    distill->add_option("--seed", distill_seed, "Seed for data, backbone and head init")->capture_default_str();
    distill->add_option("--out", out_path, "Trajectory file, one JSON record per step (default: stdout)");

    // augment-preview
    auto* preview = app.add_subcommand("augment-preview", "Write augmented crops with landmark markers");
    std::uint64_t aug_seed = 0;
    std::string out_dir;
    std::size_t count = 0;
    preview->add_option("--annotations", annotations, "JSON-lines annotation file")->required();
    preview->add_option("--seed", aug_seed, "Augmentation seed")->capture_default_str();
    preview->add_option("--out", out_dir, "Output directory")->required();
    preview->add_option("--count", count, "Samples to render (0 = all)")->capture_default_str();

    // bench
    auto* bench = app.add_subcommand("bench", "Forward-pass latency (asserts nothing)");
    std::size_t iterations = 5;
    std::uint64_t bench_seed = 0;
    bench->add_option("--weights", weights_path, ".lmkw weights (default: random weights)");
    bench->add_option("--iterations", iterations, "Timed forward passes")->check(CLI::Range(1, 1000000))
        ->capture_default_str();
    bench->add_option("--seed", bench_seed, "Seed for random weights and input")->capture_default_str();

    // replay
    auto* replay_cmd = app.add_subcommand("replay", "Re-run the invocation recorded in a manifest");
    std::string replay_from;
    replay_cmd->add_option("manifest", replay_from, "Manifest written by an earlier run")->required();

    std::vector<std::string> reversed(argv.rbegin(), argv.rend() - (argv.empty() ? 0 : 1));
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp& e) {
        out << app.help();
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        err << "lmk: " << e.what() << "\n" << "Run with --help for usage.\n";
        return kExitUsage;
    }

    CLI::App* sub = app.get_subcommands().front();
    if (sub == replay_cmd) {
        try {
            return replay(replay_from, manifest_path, out, err);
        } catch (const IoError& e) {
            err << "lmk: " << e.what() << "\n";
            return kExitIo;
        } catch (const FormatError& e) {
            err << "lmk: " << e.what() << "\n";
            return kExitIo;
        }
    }

    Context ctx{ModelConfig::student(), threads, out, err, {}};
    ctx.manifest.subcommand = sub->get_name();
    ctx.manifest.args = replayable_args(argv);

    int code = kExitOk;
    try {
        if (config_override) {
            ctx.config = *config_override;
        } else {
            const char* env = std::getenv(kConfigEnv);
            const std::string path = !config_path.empty() ? config_path : (env ? std::string(env) : std::string());
            if (!path.empty()) {
                ctx.config = load_config(path);
                ctx.manifest.inputs.push_back(path);
            }
        }
        ctx.config.validate();
        ctx.manifest.config = ctx.config;

        if (sub == infer) {
            const ModelConfig& cfg = ctx.config;
            const WeightStore w = load_checked_weights(weights_path, cfg);
            const Tensor image = read_pnm(image_path);
            ctx.manifest.inputs.insert(ctx.manifest.inputs.end(), {weights_path, image_path});
            write_or_print(ctx, out_path, format_landmarks(infer_one(image, parse_bbox(bbox_text), w, cfg, crop_space)));
        } else if (sub == eval) {
            const ModelConfig& cfg = ctx.config;
            const NmeNorm norm = parse_norm(norm_text);
            const WeightStore w = load_checked_weights(weights_path, cfg);
            const auto samples = load_annotations(annotations, cfg.num_landmarks());
            ctx.manifest.inputs.insert(ctx.manifest.inputs.end(), {weights_path, annotations});
            if (samples.empty()) throw FormatError("no samples in " + annotations);
            std::vector<float> errors(samples.size());
            std::vector<std::string> failures(samples.size());
            auto worker = [&](std::size_t first) {
                for (std::size_t i = first; i < samples.size(); i += ctx.threads) {
                    try {
                        const Tensor image = read_pnm(samples[i].image);
                        errors[i] = nme(infer_one(image, samples[i].bbox, w, cfg, false), samples[i].landmarks, norm);
                    } catch (const std::exception& e) {
                        failures[i] = e.what();
                    }
                }
            };
            std::vector<std::thread> pool;
            for (std::size_t t = 1; t < std::min(ctx.threads, samples.size()); ++t) pool.emplace_back(worker, t);
            worker(0);
            for (auto& t : pool) t.join();
            for (std::size_t i = 0; i < samples.size(); ++i)
                if (!failures[i].empty()) throw IoError(samples[i].image + ": " + failures[i]);
            double total = 0;
            char line[512];
            for (std::size_t i = 0; i < samples.size(); ++i) {
                std::snprintf(line, sizeof line, "%s %.6g\n", samples[i].image.c_str(), static_cast<double>(errors[i]));
                out << line;
                total += errors[i];
            }
            const double mean = total / static_cast<double>(samples.size());
            std::snprintf(line, sizeof line, "mean_nme %.6g (%zu images, norm %s)\n", mean, samples.size(),
                          norm_text.c_str());
            out << line;
            if (max_nme && mean > *max_nme) {
                err << "lmk: mean NME " << mean << " exceeds --max-nme " << *max_nme << "\n";
                code = kExitFailure;
            }
        } else if (sub == verify) {
            ctx.manifest.seeds["verify"] = seed;
            std::vector<std::string> names = suite == "all" ? verify_suite_names() : std::vector<std::string>{suite};
            bool all_ok = true;
            for (const auto& name : names) {
                const SuiteResult r = run_suite(name, trials, seed);
                out << r.name << ": " << r.passed << "/" << r.total << (r.ok() ? " PASS" : " FAIL") << "\n";
                for (const auto& f : r.failures) out << "  " << f << "\n";
                all_ok = all_ok && r.ok();
            }
            code = all_ok ? kExitOk : kExitFailure;
        } else if (sub == prof) {
            ModelConfig cfg = ctx.config;
            if (alpha) cfg.alpha = *alpha;
            cfg.validate();
            ctx.manifest.config = cfg;
            const CostReport report = profile(cfg);
            out << format_table(report);
            if (!json_path.empty()) {
                write_text_atomic(json_path, to_json(report).dump(2) + "\n");
                ctx.manifest.outputs.push_back(json_path);
            }
        } else if (sub == distill) {
            ctx.manifest.seeds["distill"] = distill_seed;
            ToyDistillConfig toy;
            const auto trajectory = toy_distill_run(toy, steps, distill_seed);
            std::string text;
            for (std::size_t k = 0; k < trajectory.size(); ++k)
                text += nlohmann::json{{"step", k},
                                       {"kd", trajectory[k].kd},
                                       {"reg", trajectory[k].reg},
                                       {"total", trajectory[k].total}}
                            .dump() +
                        "\n";
            write_or_print(ctx, out_path, text);
            if (!trajectory.empty())
                err << "distill-toy: total " << trajectory.front().total << " -> " << trajectory.back().total << " over "
                    << trajectory.size() << " steps\n";
        } else if (sub == preview) {
            ctx.manifest.seeds["augment"] = aug_seed;
            const ModelConfig& cfg = ctx.config;
            const auto samples = load_annotations(annotations, cfg.num_landmarks());
            ctx.manifest.inputs.push_back(annotations);
            AugmentPolicy policy;
            policy.flip_permutation = cfg.scheme.flip_permutation;
            if (policy.flip_permutation.empty()) policy.hflip_prob = 0;
            std::filesystem::create_directories(out_dir);
            const std::size_t n = count == 0 ? samples.size() : std::min(count, samples.size());
            for (std::size_t i = 0; i < n; ++i) {
                const Tensor image = read_pnm(samples[i].image);
                const CropResult crop = crop_resize(image, samples[i].bbox, samples[i].landmarks, cfg.input_size);
                auto rng = sample_rng(aug_seed, i);
                AugmentedSample a = augment(crop.image, crop.landmarks, policy, rng);
                char stem[32];
                std::snprintf(stem, sizeof stem, "sample_%04zu", i);
                const auto base = std::filesystem::path(out_dir) / stem;
                draw_markers(a.image, a.landmarks);
                write_ppm(a.image, base.string() + ".ppm");
                write_text_atomic(base.string() + ".txt", format_landmarks(a.landmarks));
                ctx.manifest.outputs.push_back(base.string() + ".ppm");
                ctx.manifest.outputs.push_back(base.string() + ".txt");
            }
            out << "augment-preview: wrote " << n << " samples to " << out_dir << "\n";
        } else if (sub == bench) {
            ctx.manifest.seeds["bench"] = bench_seed;
            const ModelConfig& cfg = ctx.config;
            const WeightStore w =
                weights_path.empty() ? random_weights(cfg, bench_seed) : load_checked_weights(weights_path, cfg);
            if (!weights_path.empty()) ctx.manifest.inputs.push_back(weights_path);
            std::mt19937_64 rng(bench_seed);
            std::uniform_real_distribution<float> unit(0.0f, 1.0f);
            Tensor image({3, cfg.input_size, cfg.input_size});
            for (auto& v : image.mutable_values()) v = unit(rng);
            std::vector<double> ms;
            for (std::size_t i = 0; i < iterations; ++i) {
                const auto t0 = std::chrono::steady_clock::now();
                (void)predict(image, w, cfg);
                ms.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
            }
            std::sort(ms.begin(), ms.end());
            double mean = 0;
            for (double m : ms) mean += m;
            mean /= static_cast<double>(ms.size());
            char line[160];
            std::snprintf(line, sizeof line, "bench: %zu iterations, mean %.2f ms, median %.2f ms, min %.2f ms\n",
                          ms.size(), mean, ms[ms.size() / 2], ms.front());
            out << line;
        }
    } catch (const ArgumentError& e) {
        err << "lmk: " << e.what() << "\n";
        code = kExitUsage;
    } catch (const IoError& e) {
        err << "lmk: " << e.what() << "\n";
        code = kExitIo;
    } catch (const FormatError& e) {
        err << "lmk: " << e.what() << "\n";
        code = kExitIo;
    } catch (const MissingTensorError& e) {
        err << "lmk: " << e.what() << "\n";
        code = kExitIo;
    } catch (const DivergenceError& e) {
        err << "lmk: " << e.what() << " (step " << e.step() << ")\n";
        code = kExitFailure;
    } catch (const Error& e) {
        err << "lmk: " << e.what() << "\n";
        code = kExitFailure;
    }

    ctx.manifest.exit_code = code;
    ctx.manifest.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    try {
        write_text_atomic(manifest_path, nlohmann::json(ctx.manifest).dump(2) + "\n");
    } catch (const IoError& e) {
        err << "lmk: " << e.what() << "\n";
        if (code == kExitOk) code = kExitIo;
    }
    return code;
}

} // namespace lmk
