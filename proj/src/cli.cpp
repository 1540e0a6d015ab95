#include "ttgan/cli.hpp"

#include <fmt/format.h>

#include <CLI11.hpp>
#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>

#include "ttgan/checkpoint.hpp"
#include "ttgan/config.hpp"
#include "ttgan/data.hpp"
#include "ttgan/errors.hpp"
#include "ttgan/gan.hpp"
#include "ttgan/gradcheck_suite.hpp"
#include "ttgan/metrics.hpp"
#include "ttgan/tt.hpp"
#include "ttgan/volume_io.hpp"

namespace fs = std::filesystem;

namespace ttgan {

namespace {

// Bad invocation or input the caller controls; exit 2.
class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

std::optional<std::string> env_seed() {
    if (const char* s = std::getenv("TTGAN_SEED")) return std::string(s);
    return std::nullopt;
}

std::uint64_t resolve_seed(const std::optional<std::uint64_t>& flag) {
    if (flag) return *flag;
    if (auto env = env_seed()) {
        GanConfig tmp;
        try {
            set_config_key(tmp, "seed", *env);
        } catch (const ConfigError& e) {
            throw ConfigError(std::string("TTGAN_SEED: ") + e.what());
        }
        return tmp.seed;
    }
    return 1;
}

std::string dashed(std::string key) {
    std::replace(key.begin(), key.end(), '_', '-');
    return key;
}

void require_file(const fs::path& p, const std::string& what) {
    if (p.empty()) throw UsageError(what + " is required");
    if (!fs::is_regular_file(p)) throw UsageError(what + " not found: " + p.string());
}

void write_text(const fs::path& p, const std::string& text) {
    std::ofstream f(p, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write " + p.string());
    f << text;
    if (!f) throw IoError("write failed: " + p.string());
}

std::string history_line(const EpochRecord& r) {
    return fmt::format("{},{},{},{},{},{}\n", r.epoch, r.loss_d, r.loss_c, r.loss_g, r.val_acc, r.val_auc);
}

// Every run-config key as `--key-name` (and `--key_name` where they differ).
struct ConfigFlags {
    std::string config_path;
    std::vector<std::pair<std::string, CLI::Option*>> options;
    std::map<std::string, std::string> values;

    void attach(CLI::App* app) {
        app->add_option("--config", config_path, "key=value configuration file");
        for (const auto& key : run_config_keys()) {
            std::string names = "--" + dashed(key);
            if (dashed(key) != key) names += ",--" + key;
            if (key == "checkpoint") names += ",--resume";
            options.emplace_back(key, app->add_option(names, values[key], "configuration key " + key));
        }
    }

    KeyValues overrides() const {
        KeyValues out;
        for (const auto& [key, opt] : options)
            if (opt->count() > 0) out.emplace_back(key, values.at(key));
        return out;
    }

    KeyValues file() const { return config_path.empty() ? KeyValues{} : read_key_values(config_path); }
};

std::vector<const VolumeSample*> labeled_only(const std::vector<VolumeSample>& samples) {
    std::vector<const VolumeSample*> out;
    for (const auto& s : samples)
        if (s.label) out.push_back(&s);
    return out;
}

DenseTensor classify_batched(ThreePlayerState& s, const std::vector<const VolumeSample*>& samples) {
    const std::size_t chunk = 16, k = s.config().class_count;
    DenseTensor probs({samples.size(), k});
    for (std::size_t start = 0; start < samples.size(); start += chunk) {
        const std::size_t end = std::min(samples.size(), start + chunk);
        std::vector<const VolumeSample*> part(samples.begin() + static_cast<std::ptrdiff_t>(start),
                                              samples.begin() + static_cast<std::ptrdiff_t>(end));
        const auto p = classify(s, stack_volumes(part));
        std::copy(p.data().begin(), p.data().end(), probs.data().begin() + static_cast<std::ptrdiff_t>(start * k));
    }
    return probs;
}

// ---- synth ------------------------------------------------------------------------------

struct SynthArgs {
    std::size_t classes = 2;
    std::size_t per_class = 50;
    std::vector<std::size_t> shape{8};
    std::optional<std::uint64_t> seed;
    std::string out;
};

int cmd_synth(const SynthArgs& a, std::ostream& out) {
    if (!fs::is_directory(a.out)) throw UsageError("output directory does not exist: " + a.out);
    if (a.shape.size() != 1 && a.shape.size() != 3) throw UsageError("--shape takes one extent or three");
    const VolumeShape shape = a.shape.size() == 1 ? VolumeShape{a.shape[0], a.shape[0], a.shape[0]}
                                                  : VolumeShape{a.shape[0], a.shape[1], a.shape[2]};
    const auto samples = make_synthetic(a.classes, a.per_class, shape, resolve_seed(a.seed));
    save_samples(a.out, "manifest.csv", samples);
    out << fmt::format("wrote {} volumes ({} classes x {}) to {}\n", samples.size(), a.classes, a.per_class,
                       (fs::path(a.out) / "manifest.csv").string());
    return kExitOk;
}

// ---- train ------------------------------------------------------------------------------

void write_split_manifest(const fs::path& path, const std::vector<VolumeSample>& samples,
                          const std::map<std::string, fs::path>& source) {
    std::vector<ManifestEntry> entries;
    const fs::path base = fs::absolute(path.parent_path());
    for (const auto& s : samples) {
        entries.push_back({s.id, fs::proximate(source.at(s.id), base).generic_string(), s.label});
    }
    write_manifest(path, entries);
}

// Keeps history lines of epochs before `epoch`.
std::string history_prefix(const fs::path& path, std::size_t epoch) {
    std::ifstream f(path);
    std::string kept, line;
    while (std::getline(f, line)) {
        const auto comma = line.find(',');
        if (comma == std::string::npos) continue;
        try {
            if (std::stoull(line.substr(0, comma)) < epoch) kept += line + "\n";
        } catch (const std::exception&) {
        }
    }
    return kept;
}

int cmd_train(const ConfigFlags& flags, std::ostream& out) {
    const auto file = flags.file();
    const auto overrides = flags.overrides();
    std::optional<Checkpoint> resume;
    {
        RunConfig probe;
        for (const KeyValues* layer : {&file, &overrides})
            for (const auto& [k, v] : *layer)
                if (k == "checkpoint") probe.checkpoint = v;
        if (!probe.checkpoint.empty()) {
            require_file(probe.checkpoint, "checkpoint");
            resume = load_checkpoint(probe.checkpoint);
        }
    }
    const RunConfig rc = resolve_run_config(file, overrides, env_seed(),
                                            resume ? std::optional(config_from_text(resume->config_text))
                                                   : std::nullopt);
    if (rc.data_dir.empty()) throw UsageError("data_dir is required");
    if (rc.out_dir.empty()) throw UsageError("out_dir is required");
    const fs::path manifest = rc.data_dir / "manifest.csv";
    require_file(manifest, "manifest");

    const auto entries = read_manifest(manifest);
    std::map<std::string, fs::path> source;
    for (const auto& e : entries) {
        const fs::path p(e.path);
        source[e.id] = fs::absolute(p.is_absolute() ? p : rc.data_dir / p).lexically_normal();
    }
    const auto samples = load_samples(manifest);
    const std::size_t e = rc.gan.volume_extent;
    for (const auto& s : samples) {
        if (!s.label) throw UsageError("training manifest entry " + s.id + " has no label");
        if (*s.label >= rc.gan.class_count) {
            throw UsageError(fmt::format("label {} of {} is outside class_count {}", *s.label, s.id, rc.gan.class_count));
        }
        if (s.volume.shape() != Shape{e, e, e, 1}) {
            throw UsageError("volume " + s.id + " has shape " + shape_to_string(s.volume.shape()) +
                             ", expected volume_extent " + std::to_string(e));
        }
    }
    const DatasetSplit data = split(samples, rc.labeled_fraction, rc.gan.seed);

    fs::create_directories(rc.out_dir);
    write_split_manifest(rc.out_dir / "train_manifest.csv", data.train, source);
    write_split_manifest(rc.out_dir / "val_manifest.csv", data.validation, source);
    write_split_manifest(rc.out_dir / "test_manifest.csv", data.test, source);

    std::unique_ptr<ThreePlayerState> state;
    if (resume) {
        resume->config_text = config_to_text(rc.gan);
        state = state_from_checkpoint(*resume);
    } else {
        state = std::make_unique<ThreePlayerState>(rc.gan);
    }
    const fs::path history = rc.out_dir / "history.csv";
    write_text(history, resume ? history_prefix(history, state->epoch) : std::string{});
    out << fmt::format("train: {} labeled, {} unlabeled, {} validation; epochs {}..{}\n", data.labeled_count(),
                       data.train.size() - data.labeled_count(), data.validation.size(), state->epoch,
                       rc.gan.epochs);

    TrainOptions options;
    options.on_epoch = [&](const EpochRecord& r, ThreePlayerState& s) {
        std::ofstream h(history, std::ios::binary | std::ios::app);
        h << history_line(r);
        if (!h) throw IoError("write failed: " + history.string());
        save_state(rc.out_dir / "checkpoint.ttg", s);
        out << history_line(r) << std::flush;
    };
    const TrainResult result = train(*state, data, options);
    if (result.best) {
        ThreePlayerState best(rc.gan);
        restore(best, *result.best);
        save_state(rc.out_dir / "best.ttg", best);
        out << fmt::format("best epoch {}: val_acc={} val_auc={}\n", result.best_epoch, result.best_val_acc,
                           result.best_val_auc);
    }
    if (result.failure) throw NumericError(*result.failure);
    return kExitOk;
}

// ---- eval -------------------------------------------------------------------------------

struct EvalArgs {
    std::string checkpoint, manifest, report;
};

int cmd_eval(const EvalArgs& a, std::ostream& out) {
    require_file(a.checkpoint, "checkpoint");
    require_file(a.manifest, "manifest");
    auto state = load_state(a.checkpoint);
    const auto samples = load_samples(a.manifest);
    const auto labeled = labeled_only(samples);
    if (labeled.empty()) throw UsageError("manifest has no labeled samples: " + a.manifest);
    std::vector<std::size_t> labels;
    for (const auto* s : labeled) {
        if (*s->label >= state->config().class_count) throw UsageError("label outside the checkpoint's classes");
        labels.push_back(*s->label);
    }
    const auto report = evaluate_predictions(classify_batched(*state, labeled), labels);
    const fs::path report_path = a.report.empty() ? fs::path(a.checkpoint).parent_path() / "report.txt" : fs::path(a.report);
    write_text(report_path, report_to_text(report));
    out << report_table(report);
    out << fmt::format("report: {}\n", report_path.string());
    return kExitOk;
}

// ---- compress ---------------------------------------------------------------------------

struct CompressArgs {
    std::string input;
    std::vector<std::size_t> ranks{1, 2, 4, 8, 16, 32, 64};
};

int cmd_compress(const CompressArgs& a, std::ostream& out) {
    require_file(a.input, "tensor file");
    DenseTensor x = load_volume(a.input);
    Shape shape = x.shape();
    while (shape.size() > 1 && shape.back() == 1) shape.pop_back();
    x = reshape(x, shape);
    if (shape.size() < 2) throw UsageError("tensor must have at least two non-trivial modes");
    out << "rank,tt_params,dense_params,ratio,rel_error\n";
    for (std::size_t r : a.ranks) {
        if (r == 0) throw UsageError("ranks must be positive");
        const std::vector<std::size_t> max_ranks(shape.size() - 1, r);
        const auto res = tt_svd(x, max_ranks, 0.0);
        const auto pc = tt_param_count(res.tt);
        out << fmt::format("{},{},{},{},{}\n", r, pc.tt_params, pc.dense_params, pc.ratio, res.relative_error);
    }
    return kExitOk;
}

// ---- gradcheck --------------------------------------------------------------------------

struct GradcheckArgs {
    std::string layer;
    std::optional<std::uint64_t> seed;
    std::size_t samples = 10;
};

int cmd_gradcheck(const GradcheckArgs& a, std::ostream& out) {
    std::vector<std::string> names;
    if (a.layer == "all") {
        names = primitive_check_names();
        for (auto& n : layer_check_names()) names.push_back(std::move(n));
    } else {
        names.push_back(a.layer);
    }
    const std::uint64_t seed = resolve_seed(a.seed);
    double worst = 0.0;
    for (const auto& name : names) {
        ad::GradCheckCase c;
        try {
            c = make_check_case(name);
        } catch (const ArgumentError& e) {
            std::string known;
            for (const auto& n : layer_check_names()) known += " " + n;
            throw UsageError(std::string(e.what()) + "; layers:" + known + " (or a primitive name, or all)");
        }
        const auto report = ad::check_gradients(c, seed, a.samples);
        for (const auto& entry : report.entries) out << fmt::format("{} {} {:.3e}\n", name, entry.parameter, entry.max_error);
        const double m = report.max_error();
        worst = std::max(worst, m);
        out << fmt::format("{} max_error={:.3e} {}\n", name, m, m < kGradCheckTolerance ? "PASS" : "FAIL");
    }
    return worst < kGradCheckTolerance ? kExitOk : kExitRuntime;
}

// ---- slices -----------------------------------------------------------------------------

struct SlicesArgs {
    std::string checkpoint, out_dir;
    std::size_t label = 0;
    std::size_t count = 1;
    std::optional<std::uint64_t> seed;
};

int cmd_slices(const SlicesArgs& a, std::ostream& out) {
    require_file(a.checkpoint, "checkpoint");
    if (a.out_dir.empty()) throw UsageError("--out-dir is required");
    auto state = load_state(a.checkpoint);
    if (a.label >= state->config().class_count) {
        throw UsageError(fmt::format("label {} outside class_count {}", a.label, state->config().class_count));
    }
    const auto volumes = sample(*state, a.label, a.count, resolve_seed(a.seed));
    fs::create_directories(a.out_dir);
    const std::size_t e = state->config().volume_extent;
    const std::size_t per = e * e * e;
    for (std::size_t i = 0; i < a.count; ++i) {
        DenseTensor v({e, e, e});
        std::copy_n(volumes.data().begin() + static_cast<std::ptrdiff_t>(i * per), per, v.data().begin());
        const auto slices = center_slices(v);
        for (std::size_t k = 0; k < 3; ++k) {
            const fs::path p = fs::path(a.out_dir) / fmt::format("sample_{:03}_{}.pgm", i, kSliceNames[k]);
            write_file_bytes(p, encode_pgm(slices[k]));
        }
    }
    out << fmt::format("wrote {} slices for {} class-{} samples to {}\n", 3 * a.count, a.count, a.label, a.out_dir);
    return kExitOk;
}

}  // namespace

std::array<DenseTensor, 3> center_slices(const DenseTensor& volume) {
    const auto& s = volume.shape();
    if (!(s.size() == 3 || (s.size() == 4 && s[3] == 1))) {
        throw ShapeError("center_slices: expected [W,H,L] or [W,H,L,1], got " + shape_to_string(s));
    }
    const std::size_t w = s[0], h = s[1], l = s[2];
    auto at = [&](std::size_t x, std::size_t y, std::size_t z) { return volume[(x * h + y) * l + z]; };
    DenseTensor coronal({l, w}), sagittal({l, h}), axial({h, w});
    for (std::size_t z = 0; z < l; ++z)
        for (std::size_t x = 0; x < w; ++x) coronal[z * w + x] = at(x, h / 2, z);
    for (std::size_t z = 0; z < l; ++z)
        for (std::size_t y = 0; y < h; ++y) sagittal[z * h + y] = at(w / 2, y, z);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) axial[y * w + x] = at(x, y, l / 2);
    return {coronal, sagittal, axial};
}

std::vector<std::uint8_t> encode_pgm(const DenseTensor& image) {
    if (image.rank() != 2) throw ShapeError("encode_pgm: expected a [rows, cols] image");
    const std::string header = fmt::format("P5 {} {} 255\n", image.dim(1), image.dim(0));
    std::vector<std::uint8_t> out(header.begin(), header.end());
    for (double v : image.data()) {
        const double p = std::round((v + 1.0) * 127.5);
        out.push_back(static_cast<std::uint8_t>(std::clamp(std::isnan(p) ? 0.0 : p, 0.0, 255.0)));
    }
    return out;
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Tensor-train compressed three-player semi-supervised GAN on synthetic 3-D volumes", "ttgan"};
    app.require_subcommand(1);

    SynthArgs synth;
    auto* synth_cmd = app.add_subcommand("synth", "write a synthetic labeled volume dataset and its manifest");
    synth_cmd->add_option("--classes", synth.classes, "class count")->capture_default_str();
    synth_cmd->add_option("--per-class", synth.per_class, "volumes per class")->capture_default_str();
    synth_cmd->add_option("--shape", synth.shape, "extent, or three extents W H L")->expected(1, 3);
    synth_cmd->add_option("--seed", synth.seed, "RNG seed (default: TTGAN_SEED, else 1)");
    synth_cmd->add_option("--out", synth.out, "existing output directory")->required();

    ConfigFlags train_flags;
    auto* train_cmd = app.add_subcommand("train", "train the three networks; writes history, checkpoints, split manifests");
    train_flags.attach(train_cmd);

    EvalArgs eval;
    auto* eval_cmd = app.add_subcommand("eval", "classifier metrics on a manifest");
    eval_cmd->add_option("--checkpoint", eval.checkpoint, "checkpoint file")->required();
    eval_cmd->add_option("--manifest", eval.manifest, "manifest of labeled samples")->required();
    eval_cmd->add_option("--report", eval.report, "report file (default: report.txt beside the checkpoint)");

    CompressArgs compress;
    auto* compress_cmd = app.add_subcommand("compress", "TT-SVD rank ladder for a dense tensor file");
    compress_cmd->add_option("--input", compress.input, "TTV1 tensor file")->required();
    compress_cmd->add_option("--ranks", compress.ranks, "maximal TT ranks")->delimiter(',')->capture_default_str();

    GradcheckArgs gradcheck;
    auto* gradcheck_cmd = app.add_subcommand("gradcheck", "finite-difference check of one layer");
    gradcheck_cmd->add_option("layer", gradcheck.layer, "layer or primitive name, or all")->required();
    gradcheck_cmd->add_option("--seed", gradcheck.seed, "coordinate sampling seed");
    gradcheck_cmd->add_option("--samples", gradcheck.samples, "coordinates per parameter")->capture_default_str();

    SlicesArgs slices;
    auto* slices_cmd = app.add_subcommand("slices", "centre slices of generated volumes as PGM images");
    slices_cmd->add_option("--checkpoint", slices.checkpoint, "checkpoint file")->required();
    slices_cmd->add_option("--label", slices.label, "class of the generated volumes")->required();
    slices_cmd->add_option("--count", slices.count, "number of volumes")->capture_default_str();
    slices_cmd->add_option("--seed", slices.seed, "latent seed");
    slices_cmd->add_option("--out-dir", slices.out_dir, "output directory")->required();

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (synth_cmd->parsed()) return cmd_synth(synth, out);
        if (train_cmd->parsed()) return cmd_train(train_flags, out);
        if (eval_cmd->parsed()) return cmd_eval(eval, out);
        if (compress_cmd->parsed()) return cmd_compress(compress, out);
        if (gradcheck_cmd->parsed()) return cmd_gradcheck(gradcheck, out);
        if (slices_cmd->parsed()) return cmd_slices(slices, out);
    } catch (const UsageError& e) {
        err << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const ConfigError& e) {
        err << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const ArgumentError& e) {
        err << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const FormatError& e) {
        err << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
    return kExitUsage;
}

}  // namespace ttgan
