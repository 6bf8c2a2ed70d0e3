// Command-line front end: generate / pretrain / evaluate / unmix / sweep-m /
// downstream / gradcheck. Exit codes: 0 success, 1 runtime or numeric
// failure, 2 configuration or usage error.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <thread>

#include "CLI11.hpp"
#include "json.hpp"
#include "karma/config.hpp"
#include "karma/gradcheck.hpp"
#include "karma/log.hpp"
#include "karma/metrics.hpp"
#include "karma/model.hpp"
#include "karma/objective.hpp"
#include "karma/rng.hpp"
#include "karma/synthgen.hpp"
#include "karma/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct CommonOpts {
    std::string config_path;
    std::vector<std::string> overrides;
    std::string out_dir;
    std::optional<std::uint64_t> seed;
};

void write_text_file(const fs::path& path, const std::string& text) {
    std::ofstream out(path);
    if (!out) throw karma::FormatError("cannot write " + path.string());
    out << text;
    if (!out) throw karma::FormatError("write failed: " + path.string());
}

karma::train::TrainConfig resolve_train_config(const CommonOpts& opts,
                                               const fs::path& fallback = {}) {
    fs::path path = opts.config_path.empty() ? fallback : fs::path(opts.config_path);
    if (path.empty() || !fs::exists(path))
        throw karma::ConfigError("no config found (pass --config or keep config.json next to the "
                                 "checkpoint): " + path.string());
    auto cfg = karma::config::load_train_config(path, opts.overrides);
    if (opts.seed) cfg.seed = *opts.seed;
    return cfg;
}

std::vector<const karma::synth::HyperCube*> all_cubes(const karma::synth::Dataset& ds) {
    std::vector<const karma::synth::HyperCube*> out;
    for (const auto& tile : ds.tiles) out.push_back(&tile.cube);
    return out;
}

json recon_to_json(const karma::metrics::ReconReport& r) {
    return json::parse(r.to_json());
}

int cmd_generate(const CommonOpts& opts) {
    if (opts.config_path.empty()) throw karma::ConfigError("generate: --config is required");
    auto params = karma::config::load_gen_config(opts.config_path, opts.overrides);
    if (opts.seed) params.seed = *opts.seed;
    params.validate();
    auto dataset = karma::synth::generate_dataset(params);
    karma::synth::write_dataset(dataset, opts.out_dir);
    return 0;
}

int cmd_pretrain(const CommonOpts& opts, const std::string& resume) {
    auto cfg = resolve_train_config(opts);
    if (cfg.train_dir.empty()) throw karma::ConfigError("pretrain: data.train_dir is required");
    auto data = karma::synth::load_dataset(cfg.train_dir);
    std::optional<karma::synth::Dataset> val;
    if (!cfg.val_dir.empty()) val = karma::synth::load_dataset(cfg.val_dir);

    fs::create_directories(opts.out_dir);
    write_text_file(fs::path(opts.out_dir) / "config.json", karma::config::to_json_text(cfg));
    auto result = karma::train::pretrain(cfg, data, opts.out_dir, resume,
                                         val ? &*val : nullptr);
    karma::log::info("pretrain finished at step " + std::to_string(result.params.step) +
                     ", final checkpoint " + (fs::path(opts.out_dir) / "final.kckp").string());
    return 0;
}

karma::train::EvalResult evaluate_checkpoint(const fs::path& checkpoint,
                                             const karma::train::TrainConfig& cfg,
                                             const karma::synth::Dataset& data) {
    auto params = karma::model::load_checkpoint(checkpoint);
    karma::model::ModelConfig mc = cfg.model;
    mc.validate(true);
    return karma::train::evaluate_masked_reconstruction(params, mc, all_cubes(data), cfg.seed,
                                                        cfg.model.mask_ratio);
}

int cmd_evaluate(const CommonOpts& opts, const std::string& checkpoint, const std::string& data_dir,
                 const std::string& compare) {
    fs::path ckpt(checkpoint);
    auto cfg = resolve_train_config(opts, ckpt.parent_path() / "config.json");
    cfg.model.validate(true);  // a zero mask-ratio override scores the identity composite
    auto data = karma::synth::load_dataset(data_dir);

    auto primary = evaluate_checkpoint(ckpt, cfg, data);
    fs::create_directories(opts.out_dir);
    json report = recon_to_json(primary.recon);
    report["phys_loss"] = primary.phys_loss;
    write_text_file(fs::path(opts.out_dir) / "report.json", report.dump(2) + "\n");
    std::cout << report.dump(2) << "\n";

    if (!compare.empty()) {
        auto baseline = evaluate_checkpoint(fs::path(compare), cfg, data);
        json cmp{{"primary", recon_to_json(primary.recon)},
                 {"baseline", recon_to_json(baseline.recon)},
                 {"delta",
                  json{{"avg_psnr", primary.recon.avg_psnr - baseline.recon.avg_psnr},
                       {"avg_ssim", primary.recon.avg_ssim - baseline.recon.avg_ssim},
                       {"mean_sam", primary.recon.mean_sam - baseline.recon.mean_sam}}}};
        write_text_file(fs::path(opts.out_dir) / "comparison.json", cmp.dump(2) + "\n");
        std::cout << cmp["delta"].dump(2) << "\n";
    }
    return 0;
}

int cmd_unmix(const CommonOpts& opts, const std::string& checkpoint, const std::string& data_dir) {
    fs::path ckpt(checkpoint);
    auto cfg = resolve_train_config(opts, ckpt.parent_path() / "config.json");
    auto params = karma::model::load_checkpoint(ckpt);
    auto data = karma::synth::load_dataset(data_dir);
    fs::create_directories(opts.out_dir);

    const auto& a_tensor = params.at("endmembers");
    karma::synth::EndmemberMatrix learned;
    learned.bands = a_tensor.rows();
    learned.count = a_tensor.cols();
    learned.values = a_tensor.values();
    karma::synth::write_endmembers(learned, fs::path(opts.out_dir) / "endmembers_learned.emm");

    json report;
    report["endmember_file"] = "endmembers_learned.emm";
    report["M_learned"] = learned.count;

    // Alignment against ground truth only when dimensions agree.
    if (data.endmembers.count == learned.count && data.endmembers.bands == learned.bands) {
        auto alignment = karma::metrics::align_endmembers(learned, data.endmembers);
        report["alignment"] = json{{"permutation", alignment.permutation},
                                   {"mean_sam", alignment.mean_sam}};
    } else {
        karma::log::info("unmix: ground-truth M=" + std::to_string(data.endmembers.count) +
                         " does not match learned M=" + std::to_string(learned.count) +
                         "; skipping alignment");
        report["alignment"] = nullptr;
    }

    // FCLS oracle residuals per pixel with the learned basis.
    double fcls_residual_total = 0.0;
    std::int64_t pixel_total = 0;
    bool any_nonconverged = false;
    for (const auto& tile : data.tiles) {
        std::vector<double> spectrum(static_cast<std::size_t>(tile.cube.bands));
        for (std::int64_t p = 0; p < tile.cube.pixel_count(); ++p) {
            for (std::int64_t c = 0; c < tile.cube.bands; ++c)
                spectrum[static_cast<std::size_t>(c)] =
                    tile.cube.values[static_cast<std::size_t>(p * tile.cube.bands + c)];
            auto res = karma::metrics::fcls_oracle(spectrum, learned, 500);
            fcls_residual_total += res.residual_norm;
            any_nonconverged = any_nonconverged || !res.converged;
            ++pixel_total;
        }
    }
    report["fcls_mean_pixel_residual"] = fcls_residual_total / static_cast<double>(pixel_total);
    report["fcls_converged_everywhere"] = !any_nonconverged;

    // Model abundances per tile; rows live on the simplex.
    double model_residual_total = 0.0;
    std::int64_t token_total = 0;
    auto plan = karma::model::full_visibility(cfg.model.token_count());
    json dumps = json::array();
    for (const auto& tile : data.tiles) {
        auto tokens = karma::model::patchify(tile.cube, cfg.model.patch_size);
        auto fwd = karma::model::forward(tokens, plan, params, cfg.model);
        auto spectra = karma::model::token_mean_spectra(tokens, cfg.model.bands);
        for (std::int64_t t = 0; t < fwd.abundances.rows(); ++t) {
            double sq = 0.0;
            for (std::int64_t c = 0; c < cfg.model.bands; ++c) {
                double d = spectra.at(t, c) - fwd.phys_recon.at(t, c);
                sq += d * d;
            }
            model_residual_total += std::sqrt(sq);
            ++token_total;
        }
        karma::synth::AbundanceField field;
        field.height = cfg.model.grid_side();
        field.width = cfg.model.grid_side();
        field.count = learned.count;
        field.values = fwd.abundances.values();
        std::string name = "abundances_" + tile.name + ".abf";
        karma::synth::write_abundance(field, fs::path(opts.out_dir) / name);
        dumps.push_back(name);
    }
    report["model_mean_token_residual"] = model_residual_total / static_cast<double>(token_total);
    report["abundance_files"] = dumps;

    write_text_file(fs::path(opts.out_dir) / "report.json", report.dump(2) + "\n");
    std::cout << report.dump(2) << "\n";
    return 0;
}

struct SweepRow {
    std::int64_t m = 0;
    double avg_psnr = 0.0;
    double avg_ssim = 0.0;
    double phys_loss = 0.0;
};

SweepRow run_sweep_point(karma::train::TrainConfig cfg, const karma::synth::Dataset& data,
                         std::int64_t m, const fs::path& out_dir) {
    cfg.model.endmember_count = m;
    fs::create_directories(out_dir);
    write_text_file(out_dir / "config.json", karma::config::to_json_text(cfg));
    auto result = karma::train::pretrain(cfg, data, out_dir);

    // Score held-out tiles when a validation fraction exists, else the train set.
    std::size_t n = data.tiles.size();
    std::size_t n_val = static_cast<std::size_t>(
        std::llround(cfg.val_fraction * static_cast<double>(n)));
    std::vector<const karma::synth::HyperCube*> tiles;
    for (std::size_t i = (n_val > 0 && n_val < n) ? n - n_val : 0; i < n; ++i)
        tiles.push_back(&data.tiles[i].cube);
    auto eval = karma::train::evaluate_masked_reconstruction(result.params, cfg.model, tiles,
                                                             cfg.seed);
    return {m, eval.recon.avg_psnr, eval.recon.avg_ssim, eval.phys_loss};
}

int cmd_sweep_m(const CommonOpts& opts, const std::string& m_list, bool parallel) {
    auto cfg = resolve_train_config(opts);
    if (cfg.train_dir.empty()) throw karma::ConfigError("sweep-m: data.train_dir is required");
    std::vector<std::int64_t> ms;
    std::stringstream ss(m_list);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        try {
            ms.push_back(std::stoll(item));
        } catch (const std::exception&) {
            throw karma::ConfigError("sweep-m: bad M value '" + item + "'");
        }
    }
    if (ms.empty()) throw karma::ConfigError("sweep-m: empty --m-list");

    auto data = karma::synth::load_dataset(cfg.train_dir);
    fs::create_directories(opts.out_dir);
    std::vector<SweepRow> rows(ms.size());
    auto run_one = [&](std::size_t i) {
        rows[i] = run_sweep_point(cfg, data, ms[i],
                                  fs::path(opts.out_dir) / ("m" + std::to_string(ms[i])));
    };
    if (parallel) {
        std::vector<std::thread> workers;
        for (std::size_t i = 0; i < ms.size(); ++i) workers.emplace_back(run_one, i);
        for (auto& w : workers) w.join();
    } else {
        for (std::size_t i = 0; i < ms.size(); ++i) run_one(i);
    }

    std::ostringstream csv;
    csv << "M,avg_psnr,avg_ssim,phys_loss\n";
    for (const auto& row : rows) {
        csv << row.m << "," << json(row.avg_psnr).dump() << "," << json(row.avg_ssim).dump() << ","
            << json(row.phys_loss).dump() << "\n";
    }
    write_text_file(fs::path(opts.out_dir) / "sweep.csv", csv.str());
    std::cout << csv.str();
    return 0;
}

int cmd_downstream(const CommonOpts& opts, const std::string& checkpoint,
                   const std::string& data_dir) {
    fs::path ckpt(checkpoint);
    auto cfg = resolve_train_config(opts, ckpt.parent_path() / "config.json");
    auto params = karma::model::load_checkpoint(ckpt);
    auto data = karma::synth::load_dataset(data_dir);
    auto result = karma::train::train_downstream(params, cfg, data);
    if (result.encoder_checksum_before != result.encoder_checksum_after)
        throw karma::NumericError("downstream: frozen encoder changed");

    fs::create_directories(opts.out_dir);
    json report = json::parse(result.report.to_json());
    report["majority_top1"] = result.majority_top1;
    write_text_file(fs::path(opts.out_dir) / "segmentation.json", report.dump(2) + "\n");
    std::cout << report.dump(2) << "\n";
    return 0;
}

int cmd_gradcheck(const CommonOpts& opts, const std::string& corrupt_op) {
    if (!corrupt_op.empty()) karma::nd::testing::corrupt_backward(corrupt_op, 1.01);
    std::uint64_t seed = opts.seed.value_or(7);
    auto report = karma::gradcheck::run_suite(seed);
    karma::nd::testing::corrupt_backward("", 1.0);
    std::cout << report.to_json() << "\n";
    if (!opts.out_dir.empty()) {
        fs::create_directories(opts.out_dir);
        write_text_file(fs::path(opts.out_dir) / "gradcheck.json", report.to_json() + "\n");
    }
    if (!report.pass()) {
        karma::log::error("gradient check failed at op '" + report.worst_failure() + "'");
        return 1;
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"karma: physics-guided masked autoencoding for hyperspectral cubes"};
    app.require_subcommand(1);

    CommonOpts opts;
    std::string resume, checkpoint, data_dir, compare, m_list, corrupt_op;
    bool parallel = false;

    auto add_common = [&](CLI::App* sub, bool need_out) {
        sub->add_option("--config", opts.config_path, "JSON config file");
        sub->add_option("--override", opts.overrides,
                        "dotted.path=value applied after the config is read");
        auto* out = sub->add_option("--out", opts.out_dir, "output directory");
        if (need_out) out->required();
        sub->add_option("--seed", opts.seed, "seed override");
    };

    auto* generate = app.add_subcommand("generate", "emit synthetic tiles plus a manifest");
    add_common(generate, true);

    auto* pretrain = app.add_subcommand("pretrain", "run masked-autoencoder pretraining");
    add_common(pretrain, true);
    pretrain->add_option("--resume", resume, "checkpoint to continue from");

    auto* evaluate = app.add_subcommand("evaluate", "masked-reconstruction quality report");
    add_common(evaluate, true);
    evaluate->add_option("--checkpoint", checkpoint, "checkpoint to score")->required();
    evaluate->add_option("--data", data_dir, "dataset directory")->required();
    evaluate->add_option("--compare", compare, "second checkpoint for a paired comparison");

    auto* unmix = app.add_subcommand("unmix", "dump the learned basis, abundances and oracle fit");
    add_common(unmix, true);
    unmix->add_option("--checkpoint", checkpoint, "checkpoint to inspect")->required();
    unmix->add_option("--data", data_dir, "dataset directory")->required();

    auto* sweep = app.add_subcommand("sweep-m", "pretrain+evaluate across abundance counts");
    add_common(sweep, true);
    sweep->add_option("--m-list", m_list, "comma-separated endmember counts")->required();
    sweep->add_flag("--parallel", parallel, "run sweep points on worker threads");

    auto* downstream = app.add_subcommand("downstream", "frozen-encoder classification head");
    add_common(downstream, true);
    downstream->add_option("--checkpoint", checkpoint, "encoder checkpoint")->required();
    downstream->add_option("--data", data_dir, "dataset directory")->required();

    auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient audit");
    add_common(gradcheck, false);
    gradcheck->add_option("--corrupt-op", corrupt_op, "fault-injection hook for tests")
        ->group("");  // hidden

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        if (generate->parsed()) return cmd_generate(opts);
        if (pretrain->parsed()) return cmd_pretrain(opts, resume);
        if (evaluate->parsed()) return cmd_evaluate(opts, checkpoint, data_dir, compare);
        if (unmix->parsed()) return cmd_unmix(opts, checkpoint, data_dir);
        if (sweep->parsed()) return cmd_sweep_m(opts, m_list, parallel);
        if (downstream->parsed()) return cmd_downstream(opts, checkpoint, data_dir);
        if (gradcheck->parsed()) return cmd_gradcheck(opts, corrupt_op);
    } catch (const karma::ConfigError& e) {
        karma::log::error(e.what());
        return 2;
    } catch (const karma::UsageError& e) {
        karma::log::error(e.what());
        return 2;
    } catch (const karma::Error& e) {
        karma::log::error(e.what());
        return 1;
    } catch (const std::exception& e) {
        karma::log::error(e.what());
        return 1;
    }
    return 2;
}
