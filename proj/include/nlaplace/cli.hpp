#pragma once

// Command-line front end: gen, train, eval, ilt-bench, export-plot.
//
// Every command resolves a RunConfig (defaults < --config file < flags) and
// embeds it in each file it writes. Passing any such output file back via
// --config reproduces the run.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "dynamics.hpp"
#include "error.hpp"
#include "eval.hpp"
#include "ilt.hpp"
#include "model.hpp"

namespace nlaplace::cli {

using json = nlohmann::json;

inline constexpr int kRunConfigFormatVersion = 1;

enum ExitCode : int { kOk = 0, kFailure = 1, kConfig = 2, kNumerical = 3, kIncompatible = 4 };

/// Output directory default: $NLAPLACE_OUT_DIR, else the working directory.
inline std::filesystem::path default_out_dir()
{
    if (const char* env = std::getenv("NLAPLACE_OUT_DIR"); env && *env)
        return env;
    return ".";
}

/// Reads a RunConfig from a plain JSON object or from any file this tool
/// wrote (JSON checkpoint, JSON-lines dataset, or CSV with a '# ' header).
inline json load_run_config(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw ConfigError("cannot open config '" + path.string() + "'");
    std::stringstream buf;
    buf << in.rdbuf();
    const std::string text = buf.str();
    json j;
    std::string first = text.substr(0, text.find('\n'));
    if (first.starts_with("# "))
        first = first.substr(2);
    if (auto parsed = json::parse(first, nullptr, false); !parsed.is_discarded() && parsed.is_object())
        j = std::move(parsed);
    else if (auto whole = json::parse(text, nullptr, false); !whole.is_discarded() && whole.is_object())
        j = std::move(whole);
    else
        throw ConfigError("config '" + path.string() + "' is neither a JSON object nor an output file of this tool");
    if (j.contains("run_config"))
        j = j.at("run_config");
    if (!j.is_object())
        throw ConfigError("config '" + path.string() + "' does not hold a JSON object");
    return j;
}

namespace detail {

/// Command state: resolved config plus the flag values seen on the command line.
struct Command
{
    std::string name;
    std::string config_path;
    json flags = json::object();
};

inline json resolve(const Command& c, json defaults)
{
    json cfg = std::move(defaults);
    if (!c.config_path.empty()) {
        json file = load_run_config(c.config_path);
        if (file.contains("command") && file.at("command") != c.name)
            throw ConfigError("config '" + c.config_path + "' belongs to command " + file.at("command").dump() +
                              ", not \"" + c.name + "\"");
        file.erase("command");
        file.erase("format_version");
        for (const auto& [k, v] : file.items()) {
            if (!cfg.contains(k))
                throw ConfigError("unknown key '" + k + "' in config for " + c.name);
            if (k == "train")
                cfg[k].merge_patch(v);
            else
                cfg[k] = v;
        }
    }
    for (const auto& [k, v] : c.flags.items()) {
        if (k == "train")
            cfg[k].merge_patch(v);
        else
            cfg[k] = v;
    }
    cfg["command"] = c.name;
    cfg["format_version"] = kRunConfigFormatVersion;
    return cfg;
}

template <class T>
T get(const json& cfg, const char* key)
{
    try {
        return cfg.at(key).get<T>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config key '") + key + "': " + e.what());
    }
}

inline void write_text(const std::filesystem::path& path, const std::string& text)
{
    if (path.has_parent_path())
        std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out || !(out << text))
        throw ConfigError("cannot write '" + path.string() + "'");
}

inline std::string csv_header(const json& cfg)
{
    return "# " + cfg.dump() + "\n";
}

inline std::vector<int> parse_ids(const std::string& s)
{
    std::vector<int> ids;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ','))
        try {
            std::size_t used = 0;
            ids.push_back(std::stoi(tok, &used));
            if (used != tok.size())
                throw std::invalid_argument(tok);
        } catch (const std::exception&) {
            throw ConfigError("trajectory id '" + tok + "' is not an integer");
        }
    if (ids.empty())
        throw ConfigError("no trajectory ids given");
    return ids;
}

// --- commands ---------------------------------------------------------------

inline int gen(const json& cfg, std::ostream& out)
{
    const auto kind = dynamics::parse_system(get<std::string>(cfg, "system"));
    auto spec = dynamics::SystemSpec::defaults(kind);
    auto ds = dynamics::generate_dataset(spec, get<std::size_t>(cfg, "n_traj"), get<std::size_t>(cfg, "n_points"),
                                         get<std::uint64_t>(cfg, "seed"), get<double>(cfg, "noise_sigma"));
    ds.run_config = cfg;
    const std::filesystem::path path = get<std::string>(cfg, "output");
    if (path.has_parent_path())
        std::filesystem::create_directories(path.parent_path());
    dynamics::write_dataset(ds, path);
    out << "wrote " << path.string() << ": " << ds.trajectories.size() << " trajectories, split "
        << ds.split.train.size() << "/" << ds.split.val.size() << "/" << ds.split.test.size() << "\n";
    return kOk;
}

inline int train(const json& cfg, std::ostream& out)
{
    model::TrainConfig tc;
    tc.merge(cfg.at("train"));
    tc.seed = get<std::uint64_t>(cfg, "seed");
    const auto ds = dynamics::read_dataset(std::filesystem::path(get<std::string>(cfg, "dataset")));
    model::NeuralLaplace m(tc.model_config(ds.dim()), tc.seed);
    out << "training on " << ds.split.train.size() << " trajectories: "
        << "lr=" << tc.lr << " batch=" << tc.batch_size << " patience=" << tc.patience << " epochs=" << tc.epochs
        << " ilt=" << to_string(tc.ilt.algorithm) << " N=" << tc.ilt.degree
        << (tc.ablation_no_projection ? " (no stereographic projection)" : "") << "\n";
    const auto res = model::train(m, ds, tc, [&](const model::EpochRecord& r) {
        out << "epoch " << r.epoch << " train_loss " << eval::format_double(r.train_loss) << " val_rmse "
            << eval::format_double(r.val_rmse) << " (" << r.seconds << " s)\n";
    });
    const std::filesystem::path ck_path = get<std::string>(cfg, "output");
    const std::filesystem::path hist_path = get<std::string>(cfg, "history");
    detail::write_text(ck_path, m.checkpoint_json(&res.adam, res.history_json(), cfg).dump() + "\n");
    std::string csv = csv_header(cfg) + "epoch,train_loss,train_loss_sum,val_rmse\n";
    for (const auto& r : res.history)
        csv += std::to_string(r.epoch) + "," + eval::format_double(r.train_loss) + "," +
               eval::format_double(r.train_loss_sum) + "," + eval::format_double(r.val_rmse) + "\n";
    detail::write_text(hist_path, csv);
    out << "best epoch " << res.best_epoch << " val_rmse " << eval::format_double(res.best_val_rmse) << "; wrote "
        << ck_path.string() << " and " << hist_path.string() << "\n";
    return kOk;
}

inline const std::vector<int>& split_ids(const dynamics::TrajectorySet& ds, const std::string& split)
{
    if (split == "test")
        return ds.split.test;
    if (split == "val")
        return ds.split.val;
    if (split == "train")
        return ds.split.train;
    throw ConfigError("split must be train, val or test, got '" + split + "'");
}

inline int evaluate(const json& cfg, std::ostream& out)
{
    auto m = model::NeuralLaplace::load(get<std::string>(cfg, "checkpoint"));
    const auto ds = dynamics::read_dataset(std::filesystem::path(get<std::string>(cfg, "dataset")));
    eval::check_compatible(m, ds);
    m.reset_nfe();
    auto rep = eval::extrapolation_eval(m, ds, split_ids(ds, get<std::string>(cfg, "split")));
    rep.nfe = m.nfe();
    rep.config = cfg;
    const std::string prefix = get<std::string>(cfg, "output");
    detail::write_text(prefix + ".json", rep.to_json().dump() + "\n");
    detail::write_text(prefix + ".csv", csv_header(cfg) + rep.to_csv());
    out << "mean_rmse " << eval::format_double(rep.mean_rmse) << " std " << eval::format_double(rep.std_rmse)
        << " over " << rep.per_trajectory.size() << " trajectories; wrote " << prefix << ".json/.csv\n";
    return kOk;
}

inline int ilt_bench(const json& cfg, std::ostream& out)
{
    std::vector<IltAlgorithm> algs;
    for (const auto& a : get<std::vector<std::string>>(cfg, "algorithms"))
        algs.push_back(parse_ilt_algorithm(a));
    eval::BenchSpec spec;
    spec.degree = get<int>(cfg, "N");
    spec.points = get<std::size_t>(cfg, "points");
    spec.t_lo = get<double>(cfg, "t_lo");
    spec.t_hi = get<double>(cfg, "t_hi");
    if (!cfg.at("cme_coefficients").is_null())
        spec.cme_coefficients = get<std::string>(cfg, "cme_coefficients");
    const auto rows = eval::ilt_benchmark(algs, spec);
    const std::string path = get<std::string>(cfg, "output");
    detail::write_text(path, csv_header(cfg) + eval::bench_csv(rows));
    for (const auto& r : rows)
        out << to_string(r.algorithm) << " rmse " << eval::format_double(r.rmse) << "\n";
    out << "wrote " << path << "\n";
    return kOk;
}

inline int export_plot(const json& cfg, std::ostream& out)
{
    auto m = model::NeuralLaplace::load(get<std::string>(cfg, "checkpoint"));
    const auto ds = dynamics::read_dataset(std::filesystem::path(get<std::string>(cfg, "dataset")));
    eval::check_compatible(m, ds);
    const auto ids = parse_ids(get<std::string>(cfg, "ids"));
    for (int id : ids)
        if (std::find(ds.split.test.begin(), ds.split.test.end(), id) == ds.split.test.end())
            throw ConfigError("trajectory id " + std::to_string(id) + " is not in the test split");
    const std::filesystem::path dir = get<std::string>(cfg, "output");
    for (int id : ids) {
        const auto path = dir / ("trajectory_" + std::to_string(id) + ".csv");
        detail::write_text(path, csv_header(cfg) + eval::export_plot_csv(m, ds.by_id(id)));
        out << "wrote " << path.string() << "\n";
    }
    return kOk;
}

} // namespace detail

/// Parses argv and runs one command. Returns the process exit code.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr)
{
    CLI::App app{"Neural Laplace: learn differential equations in the Laplace domain"};
    app.require_subcommand(1);
    std::string out_dir = default_out_dir().string();
    app.add_option("--out-dir", out_dir, "Default directory for outputs (env NLAPLACE_OUT_DIR)");

    detail::Command cmd;
    json& f = cmd.flags;

    // Options land in the flag overlay only when given on the command line.
    std::vector<std::function<void()>> apply;
    auto opt = [&](CLI::App* sub, const std::string& name, const std::string& key, auto sample,
                   const std::string& help) {
        auto holder = std::make_shared<decltype(sample)>();
        auto* o = sub->add_option(name, *holder, help);
        apply.push_back([o, holder, key, &f] {
            if (o->count() > 0)
                f[key] = *holder;
        });
    };
    auto train_opt = [&](CLI::App* sub, const std::string& name, const std::string& ptr, auto sample,
                         const std::string& help) {
        auto holder = std::make_shared<decltype(sample)>();
        auto* o = sub->add_option(name, *holder, help);
        apply.push_back([o, holder, ptr, &f] {
            if (o->count() > 0)
                f["train"][json::json_pointer(ptr)] = *holder;
        });
    };
    auto common = [&](CLI::App* sub) {
        sub->add_option("--config", cmd.config_path, "RunConfig JSON, or any output file of this tool");
        opt(sub, "--seed", "seed", std::uint64_t{}, "Global seed");
        opt(sub, "--out", "output", std::string{}, "Output path");
    };

    auto* gen = app.add_subcommand("gen", "Generate a benchmark dataset (JSON lines)");
    common(gen);
    opt(gen, "--system", "system", std::string{}, "System name");
    opt(gen, "--n", "n_traj", std::size_t{}, "Number of trajectories");
    opt(gen, "--points", "n_points", std::size_t{}, "Samples per trajectory");
    opt(gen, "--noise", "noise_sigma", double{}, "Gaussian observation noise sigma");

    auto* tr = app.add_subcommand("train", "Train a model on a dataset");
    common(tr);
    opt(tr, "--dataset", "dataset", std::string{}, "Dataset file");
    opt(tr, "--history", "history", std::string{}, "Per-epoch history CSV path");
    train_opt(tr, "--epochs", "/epochs", int{}, "Epoch budget");
    train_opt(tr, "--lr", "/lr", double{}, "Adam learning rate");
    train_opt(tr, "--batch-size", "/batch_size", int{}, "Minibatch size");
    train_opt(tr, "--patience", "/patience", int{}, "Early-stopping patience (epochs)");
    train_opt(tr, "--latent-dim", "/latent_dim", int{}, "Latent size K");
    train_opt(tr, "--hidden-units", "/hidden_units", int{}, "Encoder GRU width");
    train_opt(tr, "--rep-units", "/rep_units", int{}, "Representation network width");
    train_opt(tr, "--ilt", "/ilt/algorithm", std::string{}, "fsi, stehfest, talbot or cme");
    train_opt(tr, "--N", "/ilt/N", int{}, "ILT degree");
    train_opt(tr, "--cme-coefficients", "/ilt/cme_coefficients", std::string{},
              "CME coefficient table");
    train_opt(tr, "--phi-max", "/phi_max", double{}, "Cap on output latitude phi'");
    auto* ablation = tr->add_flag("--ablation-no-projection", "Feed and emit raw complex values (ablation)");
    apply.push_back([ablation, &f] {
        if (ablation->count() > 0)
            f["train"]["ablation_no_projection"] = true;
    });

    auto* ev = app.add_subcommand("eval", "Extrapolation RMSE on a dataset split");
    common(ev);
    opt(ev, "--checkpoint", "checkpoint", std::string{}, "Checkpoint file");
    opt(ev, "--dataset", "dataset", std::string{}, "Dataset file");
    opt(ev, "--split", "split", std::string{}, "train, val or test");

    auto* ib = app.add_subcommand("ilt-bench", "ILT accuracy on F(s)=s/(s^2+1) vs cos t");
    common(ib);
    std::vector<std::string> algs;
    ib->add_option("--algorithms", algs, "Comma-separated algorithm names")->delimiter(',');
    opt(ib, "--N", "N", int{}, "Degree");
    opt(ib, "--points", "points", std::size_t{}, "Reconstruction points");
    opt(ib, "--cme-coefficients", "cme_coefficients", std::string{}, "CME coefficient table");

    auto* ep = app.add_subcommand("export-plot", "CSV of truth and prediction for test trajectories");
    common(ep);
    opt(ep, "--checkpoint", "checkpoint", std::string{}, "Checkpoint file");
    opt(ep, "--dataset", "dataset", std::string{}, "Dataset file");
    opt(ep, "--ids", "ids", std::string{}, "Comma-separated test trajectory ids");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kOk : kConfig;
    }
    for (const auto& a : apply)
        a();
    if (!algs.empty())
        f["algorithms"] = algs;

    const std::filesystem::path dir = out_dir;
    try {
        json cfg;
        if (gen->parsed()) {
            cmd.name = "gen";
            cfg = detail::resolve(cmd, {{"system", "lotka_volterra_dde"},
                                        {"n_traj", 1000},
                                        {"n_points", 200},
                                        {"seed", 0},
                                        {"noise_sigma", 0.0},
                                        {"output", nullptr}});
            if (cfg.at("output").is_null())
                cfg["output"] = (dir / (cfg.at("system").get<std::string>() + ".jsonl")).string();
            return detail::gen(cfg, out);
        }
        if (tr->parsed()) {
            cmd.name = "train";
            cfg = detail::resolve(cmd, {{"dataset", nullptr},
                                        {"seed", 0},
                                        {"output", (dir / "checkpoint.json").string()},
                                        {"history", nullptr},
                                        {"train", model::TrainConfig{}.to_json()}});
            if (cfg.at("dataset").is_null())
                throw ConfigError("train: --dataset is required");
            cfg["train"].erase("seed"); // the global seed drives training
            {
                model::TrainConfig check;
                check.merge(cfg.at("train"));
                cfg["train"] = check.to_json();
                cfg["train"].erase("seed");
            }
            if (cfg.at("history").is_null()) {
                std::filesystem::path h = cfg.at("output").get<std::string>();
                h.replace_extension();
                cfg["history"] = h.string() + "_history.csv";
            }
            return detail::train(cfg, out);
        }
        if (ev->parsed()) {
            cmd.name = "eval";
            cfg = detail::resolve(cmd, {{"checkpoint", nullptr},
                                        {"dataset", nullptr},
                                        {"split", "test"},
                                        {"seed", 0},
                                        {"output", (dir / "report").string()}});
            if (cfg.at("checkpoint").is_null() || cfg.at("dataset").is_null())
                throw ConfigError("eval: --checkpoint and --dataset are required");
            return detail::evaluate(cfg, out);
        }
        if (ib->parsed()) {
            cmd.name = "ilt-bench";
            cfg = detail::resolve(cmd, {{"algorithms", {"fsi", "stehfest", "talbot", "dehoog"}},
                                        {"N", 16},
                                        {"points", 1000},
                                        {"t_lo", 0.0},
                                        {"t_hi", 10.0},
                                        {"cme_coefficients", nullptr},
                                        {"seed", 0},
                                        {"output", (dir / "ilt_bench.csv").string()}});
            return detail::ilt_bench(cfg, out);
        }
        cmd.name = "export-plot";
        cfg = detail::resolve(cmd, {{"checkpoint", nullptr},
                                    {"dataset", nullptr},
                                    {"ids", nullptr},
                                    {"seed", 0},
                                    {"output", (dir / "plots").string()}});
        if (cfg.at("checkpoint").is_null() || cfg.at("dataset").is_null() || cfg.at("ids").is_null())
            throw ConfigError("export-plot: --checkpoint, --dataset and --ids are required");
        return detail::export_plot(cfg, out);
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << "\n";
        return kConfig;
    } catch (const DomainError& e) {
        err << "invalid input: " << e.what() << "\n";
        return kConfig;
    } catch (const NumericalError& e) {
        err << "numerical failure: " << e.what() << "\n";
        return kNumerical;
    } catch (const IncompatibleError& e) {
        err << "incompatible inputs: " << e.what() << "\n";
        return kIncompatible;
    } catch (const std::filesystem::filesystem_error& e) {
        err << "config error: " << e.what() << "\n";
        return kConfig;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kFailure;
    }
}

} // namespace nlaplace::cli
