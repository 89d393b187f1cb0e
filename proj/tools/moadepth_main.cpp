// moadepth: synthetic RGB-D depth-estimation trainer built around a
// mixture-of-adapters ViT. Subcommands: generate, train, eval, ablate,
// gradcheck, inspect.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "moadepth/config.hpp"
#include "moadepth/data.hpp"
#include "moadepth/error.hpp"
#include "moadepth/model.hpp"
#include "moadepth/train.hpp"

using namespace moadepth;

namespace {

constexpr const char* kUsage = R"(usage: moadepth <subcommand> [options]

subcommands:
  generate   synthesize an RGB-D dataset
             --out DIR [--count N] [--seed S] [--image-size PX]
  train      train a model
             [--config FILE] [--data DIR] [--out DIR] [--<dotted.key> VALUE ...]
  eval       score a checkpoint on a dataset split
             --checkpoint DIR --data DIR [--split train|eval]
  ablate     run the expert-count / bin-count ablation grid
             [--config FILE] --data DIR --out DIR [--experts 1,2,4,8]
             [--bins 10,40,128] [--<dotted.key> VALUE ...]
  gradcheck  finite-difference verification of every gradient path
             [--preset toy|paper] [--seed S]
  inspect    print a checkpoint's configuration and parameter counts
             --checkpoint DIR

Any configuration key (e.g. bins.count, train.seed, moa.experts) can be passed
as --<key> VALUE to override the config file. --help prints this text.
)";

struct Args {
    std::vector<std::pair<std::string, std::string>> flags;  // name (no --) -> value

    const std::string* find(const std::string& name) const {
        for (const auto& [k, v] : flags) {
            if (k == name) return &v;
        }
        return nullptr;
    }
    std::string get(const std::string& name, const std::string& fallback) const {
        const auto* v = find(name);
        return v ? *v : fallback;
    }
};

struct UsageError : std::runtime_error {
    explicit UsageError(const std::string& msg) : std::runtime_error(msg) {}
};

Args parse_flags(int argc, char** argv, int begin) {
    Args args;
    for (int i = begin; i < argc; ++i) {
        std::string arg = argv[i];
        if (arg.rfind("--", 0) != 0) {
            throw UsageError("unexpected argument '" + arg + "'");
        }
        arg = arg.substr(2);
        std::string value;
        const auto eq = arg.find('=');
        if (eq != std::string::npos) {
            value = arg.substr(eq + 1);
            arg = arg.substr(0, eq);
        } else {
            if (i + 1 >= argc) throw UsageError("flag --" + arg + " needs a value");
            value = argv[++i];
        }
        args.flags.emplace_back(arg, value);
    }
    return args;
}

std::int64_t parse_int(const std::string& flag, const std::string& value) {
    try {
        std::size_t pos = 0;
        const long long v = std::stoll(value, &pos);
        if (pos != value.size()) throw std::invalid_argument("trailing");
        return v;
    } catch (const std::exception&) {
        throw UsageError("flag --" + flag + " expects an integer, got '" + value + "'");
    }
}

std::vector<std::int64_t> parse_int_list(const std::string& flag, const std::string& value) {
    std::vector<std::int64_t> out;
    std::string item;
    for (std::size_t i = 0; i <= value.size(); ++i) {
        if (i == value.size() || value[i] == ',') {
            if (!item.empty()) out.push_back(parse_int(flag, item));
            item.clear();
        } else {
            item += value[i];
        }
    }
    if (out.empty()) throw UsageError("flag --" + flag + " expects a list of integers");
    return out;
}

// Builds a TrainConfig from --config plus dotted-key overrides; --data / --out
// are aliases for data.dir / out.dir.
TrainConfig config_from_args(const Args& args, const std::vector<std::string>& consumed) {
    FlatConfig flat;
    if (const auto* path = args.find("config")) flat = FlatConfig::parse_file(*path);
    const auto& known = known_config_keys();
    for (const auto& [key, value] : args.flags) {
        if (std::find(consumed.begin(), consumed.end(), key) != consumed.end()) continue;
        if (key == "data") {
            flat.set("data.dir", value);
        } else if (key == "out") {
            flat.set("out.dir", value);
        } else if (std::find(known.begin(), known.end(), key) != known.end()) {
            flat.set(key, value);
        } else {
            throw UsageError("unknown flag --" + key);
        }
    }
    return TrainConfig::from_flat(flat);
}

int cmd_generate(const Args& args) {
    for (const auto& [key, value] : args.flags) {
        (void)value;
        if (key != "out" && key != "count" && key != "seed" && key != "image-size") {
            throw UsageError("unknown flag --" + key);
        }
    }
    const auto* out = args.find("out");
    if (!out) throw UsageError("generate: --out DIR is required");
    const std::int64_t count = parse_int("count", args.get("count", "10"));
    const std::int64_t seed = parse_int("seed", args.get("seed", "0"));
    SceneSpec scene;
    scene.image_size = parse_int("image-size", args.get("image-size", "64"));
    DatasetManifest manifest =
        make_dataset(count, static_cast<std::uint64_t>(seed), *out, scene);
    std::printf("wrote %lld samples (%lld train / %lld eval) to %s\n",
                static_cast<long long>(manifest.size()),
                static_cast<long long>(manifest.train_count),
                static_cast<long long>(manifest.size() - manifest.train_count),
                out->c_str());
    return 0;
}

int cmd_train(const Args& args) {
    TrainConfig config = config_from_args(args, {"config"});
    TrainResult result = train(config);
    const auto& last = result.steps.back();
    std::printf("trained %lld steps; final loss %.6f (cls %.6f, reg %.6f, silog %.6f)\n",
                static_cast<long long>(last.step), last.total, last.cls, last.reg,
                last.silog);
    if (!result.evals.empty()) {
        const auto& ev = result.evals.back().report;
        std::printf("final eval: absrel %.4f rmse %.4f delta1 %.4f\n", ev.absrel, ev.rmse,
                    ev.delta1);
    }
    if (!result.checkpoint_dir.empty()) {
        std::printf("checkpoint: %s\n", result.checkpoint_dir.c_str());
    }
    return 0;
}

int cmd_eval(const Args& args) {
    for (const auto& [key, value] : args.flags) {
        (void)value;
        if (key != "checkpoint" && key != "data" && key != "split") {
            throw UsageError("unknown flag --" + key);
        }
    }
    const auto* checkpoint = args.find("checkpoint");
    const auto* data = args.find("data");
    if (!checkpoint || !data) {
        throw UsageError("eval: --checkpoint DIR and --data DIR are required");
    }
    const std::string split = args.get("split", "eval");
    MetricReport report = evaluate_checkpoint(*checkpoint, *data, split);
    std::printf("%s\n", metric_csv_header().c_str());
    std::printf("%s\n", metric_csv_row(0, split, report).c_str());
    return 0;
}

int cmd_ablate(const Args& args) {
    AblationGrid grid;
    if (const auto* e = args.find("experts")) grid.experts = parse_int_list("experts", *e);
    if (const auto* b = args.find("bins")) grid.bins = parse_int_list("bins", *b);
    TrainConfig base = config_from_args(args, {"config", "experts", "bins"});
    if (base.out_dir.empty()) throw UsageError("ablate: --out DIR is required");
    const std::string out_dir = base.out_dir;

    std::vector<AblationRow> rows = ablate(base, grid);
    std::filesystem::create_directories(out_dir);
    const std::string path = (std::filesystem::path(out_dir) / "ablation.csv").string();
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("ablate: cannot write '" + path + "'");
    out << ablation_csv_header() << '\n';
    std::printf("%s\n", ablation_csv_header().c_str());
    for (const auto& row : rows) {
        out << ablation_csv_row(row) << '\n';
        std::printf("%s\n", ablation_csv_row(row).c_str());
    }
    std::printf("wrote %s\n", path.c_str());
    return 0;
}

int cmd_gradcheck(const Args& args) {
    for (const auto& [key, value] : args.flags) {
        (void)value;
        if (key != "preset" && key != "seed") throw UsageError("unknown flag --" + key);
    }
    const std::string preset = args.get("preset", "toy");
    if (preset != "toy") {
        // The full-model section runs finite differences through the whole
        // forward pass; only the toy preset is tractable.
        throw UsageError("gradcheck: only --preset toy is supported");
    }
    const std::int64_t seed = parse_int("seed", args.get("seed", "0"));
    GradcheckSuiteResult result = run_gradcheck_suite(static_cast<std::uint64_t>(seed));
    for (const auto& section : result.sections) {
        std::printf("%-10s %s  (%zu parameters, worst rel err %.3e at %s)\n",
                    section.name.c_str(), section.report.all_pass ? "PASS" : "FAIL",
                    section.report.entries.size(), section.report.worst_rel_err,
                    section.report.worst_name.empty() ? "-"
                                                      : section.report.worst_name.c_str());
        if (!section.report.all_pass) {
            for (const auto& e : section.report.entries) {
                if (!e.pass) {
                    std::printf("  FAIL %s: rel err %.3e over %lld coords\n", e.name.c_str(),
                                e.max_rel_err, static_cast<long long>(e.coords_checked));
                }
            }
        }
    }
    if (!result.all_pass) {
        std::fprintf(stderr, "gradcheck failed\n");
        return 2;
    }
    std::printf("gradcheck: all sections pass\n");
    return 0;
}

int cmd_inspect(const Args& args) {
    for (const auto& [key, value] : args.flags) {
        (void)value;
        if (key != "checkpoint") throw UsageError("unknown flag --" + key);
    }
    const auto* checkpoint = args.find("checkpoint");
    if (!checkpoint) throw UsageError("inspect: --checkpoint DIR is required");
    DepthModel model = load_checkpoint(*checkpoint);
    std::printf("%s", model.config.to_flat().serialize().c_str());
    ParamCounts counts = count_params(model);
    std::printf("\nparameters: total %lld, trainable %lld (fraction %.6f)\n",
                static_cast<long long>(counts.total),
                static_cast<long long>(counts.trainable), counts.trainable_fraction());
    for (const auto& [component, n] : counts.by_component) {
        std::printf("  %-9s %12lld total %12lld trainable\n", component.c_str(),
                    static_cast<long long>(n),
                    static_cast<long long>(counts.trainable_by_component.count(component)
                                               ? counts.trainable_by_component.at(component)
                                               : 0));
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    if (argc < 2 || std::string(argv[1]) == "--help" || std::string(argv[1]) == "help") {
        std::printf("%s", kUsage);
        return 0;
    }
    const std::string subcommand = argv[1];
    try {
        const Args args = parse_flags(argc, argv, 2);
        if (args.find("help")) {
            std::printf("%s", kUsage);
            return 0;
        }
        if (subcommand == "generate") return cmd_generate(args);
        if (subcommand == "train") return cmd_train(args);
        if (subcommand == "eval") return cmd_eval(args);
        if (subcommand == "ablate") return cmd_ablate(args);
        if (subcommand == "gradcheck") return cmd_gradcheck(args);
        if (subcommand == "inspect") return cmd_inspect(args);
        std::fprintf(stderr, "unknown subcommand '%s'\n\n%s", subcommand.c_str(), kUsage);
        return 1;
    } catch (const UsageError& e) {
        std::fprintf(stderr, "error: %s\n\n%s", e.what(), kUsage);
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
}
