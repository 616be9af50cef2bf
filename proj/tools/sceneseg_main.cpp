// sceneseg: train a single-scene unsupervised segmentation model, apply it to
// scenes, and score cluster maps against reference masks.
//
// Exit codes: 0 success, 2 configuration/input error, 3 training divergence.

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "sceneseg/errors.hpp"
#include "sceneseg/evaluator.hpp"
#include "sceneseg/model.hpp"
#include "sceneseg/scene_io.hpp"
#include "sceneseg/trainer.hpp"

namespace fs = std::filesystem;
using namespace sceneseg;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitDiverged = 3;

fs::path with_suffix(const fs::path& base, const std::string& suffix) {
    fs::path p = base;
    const std::string ext = p.extension().string();
    p.replace_extension();
    return p.concat(suffix).concat(ext.empty() ? std::string(".png") : ext);
}

fs::path log_path_for(const fs::path& model_path) {
    fs::path p = model_path;
    p.replace_extension(".log");
    return p;
}

struct TrainArgs {
    std::string image, out;
    TrainConfig cfg;
    std::vector<uint64_t> seeds;
};

int run_train(const TrainArgs& args) {
    const Scene scene = load_scene(args.image, true);
    for (const uint64_t seed : args.seeds) {
        TrainConfig cfg = args.cfg;
        cfg.seed = seed;
        cfg.validate();

        fs::path model_path = args.out;
        if (args.seeds.size() > 1)
            model_path = with_suffix(model_path, "_seed" + std::to_string(seed));

        const auto t0 = std::chrono::steady_clock::now();
        const TrainOutput result = train(scene, cfg, [](const StepRecord& s) {
            std::fprintf(stderr, "%llu\t%zu\t%zu\t%zu\t%.9g\t%.9g\t%.9g\n",
                         static_cast<unsigned long long>(s.step), s.epoch, s.chunk, s.inner,
                         s.loss.clustering, s.loss.contrastive, s.loss.total);
        });
        const double secs =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

        save_model(result.params, model_path);
        std::ofstream log_file(log_path_for(model_path));
        if (!log_file) throw IoError("cannot write " + log_path_for(model_path).string());
        result.log.write_tsv(log_file);

        std::cout << "wrote " << model_path.string() << " and " << log_path_for(model_path).string()
                  << " (" << result.log.steps.size() << " steps, " << int(secs) << "s, seed "
                  << seed << ")\n";
    }
    return 0;
}

struct SegmentArgs {
    std::string model, image, out, mapping;
    bool binary = false;
    size_t tile = 128;
};

/// Mapping files are either {"mapping": {"0": "buildings", ...}, "palette":
/// [...]} (the eval report shape) or a bare {"0": "buildings"} object. Values
/// may be palette names or class indices.
std::pair<std::vector<int32_t>, Palette> parse_mapping(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open mapping file " + path.string());
    nlohmann::json doc;
    try {
        in >> doc;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("mapping " + path.string() + ": invalid JSON: " + e.what());
    }
    Palette palette = default_palette();
    if (doc.contains("palette")) {
        palette.entries.clear();
        for (const auto& item : doc["palette"]) {
            PaletteEntry e;
            e.name = item.at("name").get<std::string>();
            for (int i = 0; i < 3; ++i) e.rgb[i] = item.at("rgb")[i].get<uint8_t>();
            palette.entries.push_back(e);
        }
        palette.validate();
    }
    const nlohmann::json& m = doc.contains("mapping") ? doc["mapping"] : doc;
    if (!m.is_object())
        throw FormatError("mapping " + path.string() + ": expected an object of cluster -> class");
    std::vector<int32_t> mapping;
    for (const auto& [key, value] : m.items()) {
        const size_t cluster = std::stoul(key);
        if (cluster >= mapping.size()) mapping.resize(cluster + 1, -1);
        if (value.is_null()) continue;
        int32_t cls;
        if (value.is_string()) {
            cls = palette.find_name(value.get<std::string>());
            if (cls < 0)
                throw FormatError("mapping " + path.string() + ": unknown class name '" +
                                  value.get<std::string>() + "'");
        } else {
            cls = value.get<int32_t>();
        }
        mapping[cluster] = cls;
    }
    return {mapping, palette};
}

int run_segment(const SegmentArgs& args) {
    const ModelParams params = load_model(args.model);
    const Scene scene = load_scene(args.image, true);
    if (args.binary && args.mapping.empty()) {
        std::cerr << "sceneseg segment: --binary needs --mapping (building class unknown)\n";
        return kExitConfig;
    }

    const SegmentationMap map = segment_scene(scene, params, args.tile, args.tile);
    write_segmentation(map, default_palette(), std::nullopt, args.out);
    std::cout << "wrote " << args.out << "\n";

    if (!args.mapping.empty()) {
        const auto [mapping, palette] = parse_mapping(args.mapping);
        const fs::path classes_path = with_suffix(args.out, "_classes");
        write_segmentation(map, palette, mapping, classes_path);
        std::cout << "wrote " << classes_path.string() << "\n";

        if (args.binary) {
            int32_t building = palette.find_name("buildings");
            if (building < 0) building = palette.find_name("building");
            if (building < 0) {
                std::cerr << "sceneseg segment: palette has no building class\n";
                return kExitConfig;
            }
            const SegmentationMap classes = apply_mapping(map, mapping);
            const SegmentationMap bin = binarize(classes, building);
            const Palette bw{{{"other", {0, 0, 0}}, {"buildings", {255, 255, 255}}}};
            const fs::path binary_path = with_suffix(args.out, "_binary");
            write_segmentation(bin, bw, std::vector<int32_t>{0, 1}, binary_path);
            std::cout << "wrote " << binary_path.string() << "\n";
        }
    }
    return 0;
}

struct EvalArgs {
    std::vector<std::string> preds, refs;
    std::string palette_path, out;
    size_t runs = 1;
};

SegmentationMap decode_prediction(const fs::path& path) {
    const ReferenceMap raw = read_reference(path, fallback_palette());
    SegmentationMap map;
    map.height = raw.height;
    map.width = raw.width;
    map.num_labels = fallback_palette().size();
    map.labels = raw.labels;
    for (int32_t l : map.labels)
        if (l == ReferenceMap::kIgnore)
            throw ConfigError(path.string() +
                              ": not a cluster map (colors outside the fallback palette)");
    return map;
}

int run_eval(const EvalArgs& args) {
    if (args.preds.empty() || args.preds.size() != args.refs.size()) {
        std::cerr << "sceneseg eval: need matching --pred/--ref pairs\n";
        return kExitConfig;
    }
    if (args.runs == 0 || args.preds.size() % args.runs != 0) {
        std::cerr << "sceneseg eval: " << args.preds.size() << " pairs do not split into "
                  << args.runs << " runs\n";
        return kExitConfig;
    }
    const Palette palette =
        args.palette_path.empty() ? default_palette() : load_palette(args.palette_path);
    std::vector<std::string> names;
    for (const auto& e : palette.entries) names.push_back(e.name);

    const size_t per_run = args.preds.size() / args.runs;
    std::vector<MetricsReport> run_reports;
    nlohmann::json tiles = nlohmann::json::array();
    for (size_t run = 0; run < args.runs; ++run) {
        ConfusionMatrix pooled;
        for (size_t i = 0; i < per_run; ++i) {
            const auto& pred_path = args.preds[run * per_run + i];
            const auto& ref_path = args.refs[run * per_run + i];
            const SegmentationMap pred = decode_prediction(pred_path);
            const ReferenceMap ref = read_reference(ref_path, palette);
            if (ref.palette_warning)
                std::cerr << "warning: more than half of " << ref_path
                          << " matched no palette color\n";
            const ConfusionMatrix cm = confusion(pred, ref);
            // per-tile metrics for transparency
            const auto tile_rep = metrics(cm, majority_map(cm), names);
            tiles.push_back({{"pred", pred_path},
                             {"ref", ref_path},
                             {"macro_f1", tile_rep.macro_f1},
                             {"macro_iou", tile_rep.macro_iou}});
            if (pooled.counts.empty())
                pooled = cm;
            else
                pooled.add(cm);
        }
        run_reports.push_back(metrics(pooled, majority_map(pooled), names));
    }

    const MetricsReport final_report =
        run_reports.size() == 1 ? run_reports.front() : average_runs(run_reports);

    nlohmann::json doc = nlohmann::json::parse(final_report.to_json());
    doc["tiles"] = tiles;
    if (run_reports.size() > 1) {
        nlohmann::json runs = nlohmann::json::array();
        for (const auto& r : run_reports) runs.push_back(nlohmann::json::parse(r.to_json()));
        doc["runs"] = runs;
    }
    const std::string text = doc.dump(2);
    std::cout << text << "\n";
    if (!args.out.empty()) {
        std::ofstream out(args.out);
        if (!out) throw IoError("cannot write " + args.out);
        out << text << "\n";
    }
    return 0;
}

std::vector<uint64_t> parse_seed_list(const std::string& csv) {
    std::vector<uint64_t> seeds;
    size_t pos = 0;
    while (pos < csv.size()) {
        const size_t comma = csv.find(',', pos);
        const std::string item = csv.substr(pos, comma == std::string::npos ? comma : comma - pos);
        if (!item.empty()) seeds.push_back(std::stoull(item));
        if (comma == std::string::npos) break;
        pos = comma + 1;
    }
    if (seeds.empty()) throw ConfigError("--seeds: no seeds given");
    return seeds;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Single-scene unsupervised semantic segmentation"};
    app.require_subcommand(1);

    TrainArgs train_args;
    uint64_t seed = 1;
    std::string seeds_csv;
    size_t patch = 128;
    auto* train_cmd = app.add_subcommand("train", "Train a model on one unlabeled scene");
    train_cmd->add_option("--image", train_args.image, "Scene raster (PNG or uncompressed TIFF)")
        ->required();
    train_cmd->add_option("--out", train_args.out, "Output model file")->required();
    train_cmd->add_option("--K", train_args.cfg.feature_count, "Cluster count (final kernels)");
    train_cmd->add_option("--epochs", train_args.cfg.epochs, "Epochs over all patches (I)");
    train_cmd->add_option("--inner-iters", train_args.cfg.inner_iters,
                          "Optimizer steps per batch (J)");
    train_cmd->add_option("--batch", train_args.cfg.batch_size, "Patches per batch (B)");
    train_cmd->add_option("--patch", patch, "Square patch side");
    train_cmd->add_option("--stride", train_args.cfg.extraction_stride, "Patch extraction stride");
    train_cmd->add_option("--lr", train_args.cfg.learning_rate, "SGD learning rate");
    train_cmd->add_option("--momentum", train_args.cfg.momentum, "SGD momentum");
    train_cmd->add_option("--ratio", train_args.cfg.attention_ratio,
                          "Attention bottleneck ratio r");
    auto* seed_opt = train_cmd->add_option("--seed", seed, "RNG seed");
    auto* seeds_opt =
        train_cmd->add_option("--seeds", seeds_csv, "Comma-separated seeds, one model each");
    seed_opt->excludes(seeds_opt);

    SegmentArgs seg_args;
    auto* seg_cmd = app.add_subcommand("segment", "Apply a trained model to a scene");
    seg_cmd->add_option("--model", seg_args.model, "Model file")->required();
    seg_cmd->add_option("--image", seg_args.image, "Scene raster")->required();
    seg_cmd->add_option("--out", seg_args.out, "Cluster map PNG")->required();
    seg_cmd->add_option("--mapping", seg_args.mapping,
                        "Cluster-to-class JSON (enables the class-colored map)");
    seg_cmd->add_flag("--binary", seg_args.binary, "Also write the building/other map");
    seg_cmd->add_option("--patch", seg_args.tile, "Inference tile side");

    EvalArgs eval_args;
    auto* eval_cmd = app.add_subcommand("eval", "Score cluster maps against references");
    eval_cmd->add_option("--pred", eval_args.preds, "Cluster map PNG (repeatable)")->required();
    eval_cmd->add_option("--ref", eval_args.refs, "Reference mask (repeatable)")->required();
    eval_cmd->add_option("--palette", eval_args.palette_path, "Palette JSON (default: ISPRS)");
    eval_cmd->add_option("--runs", eval_args.runs, "Group the pairs into this many runs");
    eval_cmd->add_option("--out", eval_args.out, "Also write the JSON report here");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitConfig;
    }

    try {
        if (*train_cmd) {
            train_args.cfg.patch_height = train_args.cfg.patch_width = patch;
            train_args.seeds = seeds_opt->count() ? parse_seed_list(seeds_csv)
                                                  : std::vector<uint64_t>{seed};
            return run_train(train_args);
        }
        if (*seg_cmd) return run_segment(seg_args);
        if (*eval_cmd) return run_eval(eval_args);
    } catch (const DivergenceError& e) {
        std::cerr << "sceneseg: training diverged: " << e.what() << "\n";
        return kExitDiverged;
    } catch (const std::exception& e) {
        std::cerr << "sceneseg: " << e.what() << "\n";
        return kExitConfig;
    }
    return 0;
}
