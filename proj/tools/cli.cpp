#include "cli.hpp"

#include "caranet/config.hpp"
#include "caranet/data_io.hpp"
#include "caranet/metrics.hpp"
#include "caranet/size_analysis.hpp"
#include "caranet/training.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <limits>

namespace caranet::cli {

namespace fs = std::filesystem;

namespace {

struct ConfigSources {
    std::string file;
    std::vector<std::string> overrides;  // key=value
};

KeyValues collect(const ConfigSources& src)
{
    KeyValues kv;
    if (!src.file.empty()) {
        std::string text;
        try {
            text = read_file(src.file);
        } catch (const std::runtime_error& e) {
            throw ConfigError(e.what());
        }
        kv = parse_key_values(text);
    }
    for (const auto& o : src.overrides) {
        const auto eq = o.find('=');
        if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + o + "'");
        const auto pairs = parse_key_values(o);
        kv.insert(kv.end(), pairs.begin(), pairs.end());
    }
    return kv;
}

void add_config_options(CLI::App* cmd, ConfigSources& src, const char* file_flag, const char* file_help)
{
    cmd->add_option(file_flag, src.file, file_help);
    cmd->add_option("--set", src.overrides, "Override a config key (key=value), repeatable");
}

void prepare_out_dir(const fs::path& dir)
{
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir)) throw std::runtime_error("cannot create output directory " + dir.string());
}

void write_resolved(const RunConfig& cfg, const fs::path& dir) { write_file(dir / "resolved.cfg", format_run_config(cfg)); }

// ----- generate ----------------------------------------------------------------

int cmd_generate(const ConfigSources& src, const std::string& out_dir, std::ostream& out)
{
    RunConfig cfg;
    apply_key_values(cfg, collect(src));
    try {
        cfg.data.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("invalid spec: ") + e.what());
    }
    prepare_out_dir(out_dir);
    const GenerateResult result = generate_synthetic(cfg.data, out_dir);
    write_resolved(cfg, out_dir);

    const auto& entries = result.manifest.entries;
    const auto n_train = static_cast<std::size_t>(
        std::count_if(entries.begin(), entries.end(), [](const auto& e) { return e.split == Split::train; }));
    out << (result.up_to_date ? "up-to-date: " : "generated: ") << entries.size() << " samples (" << n_train
        << " train, " << entries.size() - n_train << " test) in " << out_dir << "\n";

    // size-ratio histogram over the requested range
    constexpr int bins = 5;
    std::array<int, bins> hist{};
    const double lo = cfg.data.ratio_lo, hi = cfg.data.ratio_hi;
    double rmin = 1.0, rmax = 0.0;
    for (const auto& e : entries) {
        rmin = std::min(rmin, e.size_ratio);
        rmax = std::max(rmax, e.size_ratio);
        const double t = hi > lo ? (e.size_ratio - lo) / (hi - lo) : 0.0;
        hist[static_cast<std::size_t>(std::clamp(static_cast<int>(t * bins), 0, bins - 1))]++;
    }
    char line[128];
    std::snprintf(line, sizeof line, "size ratio: min %.4f%%  max %.4f%%\n", 100.0 * rmin, 100.0 * rmax);
    out << line;
    for (int b = 0; b < bins; ++b) {
        const double a = lo + (hi - lo) * b / bins, z = lo + (hi - lo) * (b + 1) / bins;
        std::snprintf(line, sizeof line, "  [%.3f%%, %.3f%%%c %d\n", 100.0 * a, 100.0 * z, b + 1 == bins ? ']' : ')',
                      hist[static_cast<std::size_t>(b)]);
        out << line;
    }
    return ok;
}

// ----- train -------------------------------------------------------------------

std::vector<Sample> load_split_at(const DatasetManifest& manifest, Split split, Index h, Index w)
{
    std::vector<Sample> samples = load_samples(manifest, split);
    for (auto& s : samples)
        if (s.image.dim(1) != h || s.image.dim(2) != w) {
            const double ratio = s.size_ratio;
            s = resize_sample(s, h, w);
            s.size_ratio = ratio;  // keep the manifest's ground-truth ratio
        }
    return samples;
}

DatasetManifest open_manifest(const std::string& path)
{
    if (path.empty()) throw ConfigError("no manifest given (data.manifest or --manifest)");
    if (!fs::exists(path)) throw FormatError("manifest not found: " + path);
    return read_manifest(path);
}

int cmd_train(const ConfigSources& src, const std::string& out_dir, const std::string& manifest_flag, bool no_cfp,
              bool no_ara, std::ostream& out)
{
    RunConfig cfg;
    apply_key_values(cfg, collect(src));
    if (!manifest_flag.empty()) cfg.manifest = manifest_flag;
    if (no_cfp) cfg.model.use_cfp = false;
    if (no_ara) cfg.model.use_ara = false;
    try {
        cfg.model.validate();
        cfg.train.validate();
        for (const double s : cfg.train.scales) {
            scaled_extent(cfg.model.input_h, s);
            scaled_extent(cfg.model.input_w, s);
        }
    } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("invalid config: ") + e.what());
    }

    const DatasetManifest manifest = open_manifest(cfg.manifest);
    const std::vector<Sample> train = load_split_at(manifest, Split::train, cfg.model.input_h, cfg.model.input_w);
    if (train.empty()) throw FormatError("manifest has no train samples");
    prepare_out_dir(out_dir);
    write_resolved(cfg, out_dir);

    CaraNet<float> model(cfg.model);
    AdamState state;
    std::vector<TrainRecord> records;
    const fs::path dir(out_dir);
    auto on_epoch = [&](int epoch) {
        if (cfg.train.checkpoint_every > 0 && epoch % cfg.train.checkpoint_every == 0) {
            char name[32];
            std::snprintf(name, sizeof name, "epoch_%03d.ckpt", epoch);
            save_checkpoint(model, state, dir / name);
        }
    };
    out << "training " << train.size() << " samples, " << model.parameters().parameter_count() << " parameters, "
        << cfg.train.epochs << " epochs\n";
    records = fit(model, state, train, cfg.train, on_epoch);
    write_file(dir / "train_log.csv", format_train_log(records));
    save_checkpoint(model, state, dir / "final.ckpt");

    // per-epoch mean loss summary
    for (int epoch = 1; epoch <= cfg.train.epochs; ++epoch) {
        double s = 0.0;
        int n = 0;
        for (const auto& r : records)
            if (r.epoch == epoch) {
                s += r.loss;
                ++n;
            }
        char line[64];
        std::snprintf(line, sizeof line, "epoch %d mean loss %.6f\n", epoch, n ? s / n : 0.0);
        out << line;
    }
    out << "wrote " << (dir / "final.ckpt").string() << "\n";
    return ok;
}

// ----- eval --------------------------------------------------------------------

int cmd_eval(const ConfigSources& src, const std::string& checkpoint, const std::string& manifest_flag,
             const std::string& split_flag, const std::string& out_dir, std::ostream& out)
{
    const KeyValues kv = collect(src);
    const Checkpoint ckpt = read_checkpoint(checkpoint);
    RunConfig cfg;
    cfg.model = ckpt.config;
    apply_key_values(cfg, kv);  // explicit model.* keys override the checkpoint's own
    if (!manifest_flag.empty()) cfg.manifest = manifest_flag;
    if (!split_flag.empty()) cfg.eval.split = split_flag;
    Split split;
    try {
        split = parse_split(cfg.eval.split);
        cfg.model.validate();
    } catch (const std::exception& e) {
        throw ConfigError(e.what());
    }
    if (!(cfg.eval.threshold > 0.0 && cfg.eval.threshold < 1.0)) throw ConfigError("eval.threshold must be in (0, 1)");

    CaraNet<float> model(cfg.model);
    AdamState state;
    restore_checkpoint(ckpt, model, state);

    const DatasetManifest manifest = open_manifest(cfg.manifest);
    std::string missing;
    for (const auto& e : manifest.entries) {
        if (e.split != split) continue;
        for (const auto& p : {e.image_path, e.mask_path})
            if (!fs::exists(manifest.resolve(p))) missing += "\n  " + e.id + ": missing " + manifest.resolve(p).string();
    }
    if (!missing.empty()) throw FormatError("missing files:" + missing);

    const std::vector<Sample> samples = load_split_at(manifest, split, cfg.model.input_h, cfg.model.input_w);
    prepare_out_dir(out_dir);
    write_resolved(cfg, out_dir);
    std::vector<Map2d> predictions;
    const MetricReport report = evaluate_dataset(model, samples, cfg.eval.threshold, &predictions);
    const fs::path dir(out_dir);
    fs::create_directories(dir / "predictions");
    for (std::size_t i = 0; i < samples.size(); ++i)
        write_image(from_map(predictions[i]), dir / "predictions" / (samples[i].id + ".pgm"));
    write_file(dir / "report.csv", format_report(report));

    const MetricRecord m = report.mean();
    char line[200];
    std::snprintf(line, sizeof line, "%zu samples  mDice %.4f  mIoU %.4f  Fbw %.4f  Salpha %.4f  Ephi %.4f  MAE %.4f\n",
                  report.records.size(), m.dice, m.iou, m.fbw, m.salpha, m.ephi, m.mae);
    out << line;
    return ok;
}

// ----- analyze -----------------------------------------------------------------

int cmd_analyze(const ConfigSources& src, const std::vector<std::string>& reports, CLI::Option* intervals_opt,
                Index intervals_flag, CLI::Option* cutoff_opt, double cutoff_flag, const std::vector<double>& range,
                const std::string& out_dir, std::ostream& out)
{
    RunConfig cfg;
    apply_key_values(cfg, collect(src));
    if (intervals_opt->count()) cfg.eval.intervals = intervals_flag;
    if (cutoff_opt->count()) cfg.eval.cutoff = cutoff_flag;
    if (reports.empty() || reports.size() > 2) throw ConfigError("--reports takes one or two report CSVs");
    if (cfg.eval.intervals < 1) throw ConfigError("eval.intervals must be >= 1");
    if (cfg.eval.window < 1) throw ConfigError("eval.window must be >= 1");
    if (!range.empty() && (range.size() != 2 || !(range[1] > range[0])))
        throw ConfigError("--range expects lo,hi with hi > lo");
    const bool do_cutoff = cutoff_opt->count() > 0;
    if (do_cutoff && !(cfg.eval.cutoff > 0.0 && cfg.eval.cutoff <= 1.0)) throw ConfigError("cutoff must be in (0, 1]");

    std::vector<MetricReport> parsed;
    for (const auto& path : reports) {
        if (!fs::exists(path)) throw FormatError("report not found: " + path);
        try {
            parsed.push_back(parse_report(read_file(path)));
        } catch (const FormatError& e) {
            throw FormatError(path + ": " + e.what());
        }
        if (parsed.back().records.empty()) throw FormatError(path + ": no sample rows");
    }

    double lo, hi;
    if (!range.empty()) {
        lo = range[0];
        hi = range[1];
    } else {
        lo = std::numeric_limits<double>::infinity();
        hi = -lo;
        for (const auto& r : parsed)
            for (const auto& rec : r.records) {
                lo = std::min(lo, rec.size_ratio);
                hi = std::max(hi, rec.size_ratio);
            }
        if (!(hi > lo)) hi = lo + 1e-6;
    }

    prepare_out_dir(out_dir);
    write_resolved(cfg, out_dir);
    const fs::path dir(out_dir);
    static constexpr const char* labels[] = {"a", "b"};
    std::vector<SizeCurve> curves;
    std::string watershed_csv = "report,watershed\n";
    for (std::size_t i = 0; i < parsed.size(); ++i) {
        curves.push_back(interval_average(size_points(parsed[i]), lo, hi, static_cast<std::size_t>(cfg.eval.intervals)));
        const std::string label = labels[i];
        write_file(dir / ("curve_" + label + ".csv"), format_curve(curves.back()));
        write_file(dir / ("curve_" + label + ".svg"), render_svg({{reports[i], &curves.back()}}));
        std::optional<double> ws;
        if (curves.back().nonempty() >= static_cast<std::size_t>(cfg.eval.window))
            ws = watershed(curves.back(), static_cast<std::size_t>(cfg.eval.window), cfg.eval.tolerance);
        watershed_csv += label + "," + (ws ? format_double(*ws) : std::string()) + "\n";
        out << "report " << label << " (" << reports[i] << "): " << parsed[i].records.size() << " samples, "
            << curves.back().nonempty() << " nonempty intervals, watershed " << (ws ? format_double(*ws) : "none")
            << "\n";
        if (do_cutoff) {
            const MetricReport small = filter_small(parsed[i], cfg.eval.cutoff);
            write_file(dir / ("filtered_" + label + ".csv"), format_report(small));
            out << "  " << small.records.size() << " samples at or below cutoff, mDice "
                << format_double(small.mean().dice) << "\n";
        }
    }
    write_file(dir / "watershed.csv", watershed_csv);
    if (curves.size() == 2) {
        const CurveComparison cmp = compare_curves(curves[0], curves[1]);
        write_file(dir / "comparison.csv", format_comparison(curves[0], curves[1], cmp));
        write_file(dir / "comparison_summary.csv",
                   "sum_positive,sum_negative\n" + format_double(cmp.sum_positive) + "," +
                       format_double(cmp.sum_negative) + "\n");
        write_file(dir / "comparison.svg", render_svg({{reports[0], &curves[0]}, {reports[1], &curves[1]}}));
        out << "comparison: sum_positive " << format_double(cmp.sum_positive) << ", sum_negative "
            << format_double(cmp.sum_negative) << "\n";
    }
    return ok;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err)
{
    CLI::App app{"Small-object segmentation: synthetic data, training, evaluation and size analysis"};
    app.require_subcommand(1);

    ConfigSources gen_src, train_src, eval_src, analyze_src;
    std::string gen_out, train_out, train_manifest, eval_ckpt, eval_manifest, eval_split, eval_out, analyze_out;
    bool no_cfp = false, no_ara = false;
    std::vector<std::string> reports;
    Index intervals = 50;
    double cutoff = 0.05;
    std::vector<double> range;

    auto* gen = app.add_subcommand("generate", "Write a seeded synthetic dataset and its manifest");
    add_config_options(gen, gen_src, "--spec", "Config file with data.* keys");
    gen->add_option("--out", gen_out, "Output directory")->required();

    auto* train = app.add_subcommand("train", "Train a model on the manifest's train split");
    add_config_options(train, train_src, "--config", "Config file");
    train->add_option("--out", train_out, "Output directory")->required();
    train->add_option("--manifest", train_manifest, "Manifest (overrides data.manifest)");
    train->add_flag("--no-cfp", no_cfp, "Replace the CFP blocks by 1x1 projections");
    train->add_flag("--no-ara", no_ara, "Replace the attention stages by plain conv heads");

    auto* eval = app.add_subcommand("eval", "Score a checkpoint on a manifest split");
    add_config_options(eval, eval_src, "--config", "Config file (model.* keys override the checkpoint)");
    eval->add_option("--checkpoint", eval_ckpt, "Checkpoint file")->required();
    eval->add_option("--manifest", eval_manifest, "Manifest (overrides data.manifest)");
    eval->add_option("--split", eval_split, "train or test (overrides eval.split)");
    eval->add_option("--out", eval_out, "Output directory")->required();

    auto* analyze = app.add_subcommand("analyze", "Size-ratio curves, comparisons and small-object filtering");
    add_config_options(analyze, analyze_src, "--config", "Config file with eval.* keys");
    analyze->add_option("--reports", reports, "One or two metric report CSVs")->required();
    auto* intervals_opt = analyze->add_option("--intervals", intervals, "Number of equal-width intervals");
    auto* cutoff_opt = analyze->add_option("--cutoff", cutoff, "Small-object size-ratio cutoff");
    analyze->add_option("--range", range, "Ratio range lo,hi (default: observed range)")->delimiter(',');
    analyze->add_option("--out", analyze_out, "Output directory")->required();

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    if (!reversed.empty()) reversed.pop_back();  // program name
    try {
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? ok : usage_error;
    }

    try {
        if (*gen) return cmd_generate(gen_src, gen_out, out);
        if (*train) return cmd_train(train_src, train_out, train_manifest, no_cfp, no_ara, out);
        if (*eval) return cmd_eval(eval_src, eval_ckpt, eval_manifest, eval_split, eval_out, out);
        if (*analyze)
            return cmd_analyze(analyze_src, reports, intervals_opt, intervals, cutoff_opt, cutoff, range, analyze_out, out);
    } catch (const NumericError& e) {
        err << "numerical failure: " << e.what() << "\n";
        return numeric_failure;
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << "\n";
        return usage_error;
    } catch (const FormatError& e) {
        err << "data error: " << e.what() << "\n";
        return usage_error;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return usage_error;
    }
    return usage_error;
}

}  // namespace caranet::cli
