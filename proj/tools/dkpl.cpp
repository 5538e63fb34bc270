// dkpl: run experiments, apply saved models, compute analysis maps, serve the
// feedback API and write synthetic datasets.

#include <csignal>
#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"

#include "dkpl/domaindata.hpp"
#include "dkpl/feedbackd.hpp"
#include "dkpl/feedbackd_server.hpp"
#include "dkpl/orchestrator.hpp"
#include "dkpl/snapshot.hpp"
#include "dkpl/synth.hpp"

namespace fs = std::filesystem;
using namespace dkpl;

namespace {

void log_step(const StepTrace& t) {
    if (t.step == 0)
        std::fprintf(stderr, "init: %zu points, %zu comparisons, objective %.4f\n", t.selected.size(),
                     t.judgments.size(), t.objective);
    else
        std::fprintf(stderr, "step %d: beta=%g pair=(%zu,%zu) best=%zu comparisons=%zu objective %.4f\n", t.step,
                     *t.beta, t.selected[0], t.selected[1], *t.best, t.judgments.size(), t.objective);
}

int cmd_run(const std::string& config, const std::string& variant, std::optional<std::uint64_t> seed,
            const std::string& out, const std::string& checkpoint, const std::string& resume,
            std::optional<int> stop_after) {
    std::optional<Session> s;
    if (!resume.empty()) {
        s.emplace(Session::load(resume));
    } else {
        auto cfg = load_config(config);
        if (!variant.empty()) apply_variant(cfg, variant);
        if (seed) cfg.seed = *seed;
        cfg.validate();
        if (cfg.judge != JudgeMode::Oracle) throw ConfigError("run needs an oracle judge; use serve for human mode");
        s.emplace(cfg);
    }
    RunOptions opt;
    opt.on_step = log_step;
    if (!checkpoint.empty()) opt.checkpoint_dir = fs::path(checkpoint);
    auto& sess = *s;
    try {
        if (stop_after) {
            if (sess.phase() == Phase::Fresh) log_step(sess.initialize());
            while (!sess.finished() && sess.step() < *stop_after) log_step(sess.run_step());
            if (opt.checkpoint_dir) sess.save(*opt.checkpoint_dir);
        } else {
            run_to_end(sess, opt);
        }
    } catch (...) {
        if (!sess.traces().empty()) export_trace(sess, out);
        throw;
    }
    export_trace(sess, out);
    std::fprintf(stderr, "wrote %s (%d steps, %zu measured)\n", out.c_str(), sess.step(), sess.measured().size());
    return 0;
}

int cmd_predict(const std::string& model_dir, const std::string& dataset, const std::string& out, bool png) {
    const auto lm = load_model(model_dir);
    const auto ds = load_dataset(dataset);
    const auto pred = predict_inputs(*lm.model.posterior, all_patch_inputs(ds.structure, lm.patch_window));
    MapContainer m;
    m.name = ds.name + "-prediction";
    m.height = ds.height;
    m.width = ds.width;
    m.arrays.emplace_back("mean", std::vector<double>(pred.mean.data(), pred.mean.data() + pred.mean.size()));
    m.arrays.emplace_back("variance",
                          std::vector<double>(pred.variance.data(), pred.variance.data() + pred.variance.size()));
    write_map_container(out, m, png);
    std::fprintf(stderr, "predicted %zu cells (%d variances clamped)\n", ds.size(), pred.clamped);
    return 0;
}

int cmd_analyze(const std::string& dataset, const std::string& map, const std::string& out, bool png, int radius,
                double bin_width, int charge_radius) {
    const auto ds = load_dataset(dataset);
    const auto kind = ground_truth_from_string(map);
    AngleConfig angle{radius, bin_width};
    angle.validate();
    const auto raw = analysis_map(ds, kind, angle, charge_radius);
    const auto norm = normalized_ground_truth(ds, kind, angle, charge_radius);
    MapContainer m;
    m.name = ds.name + "-" + map;
    m.height = ds.height;
    m.width = ds.width;
    m.arrays.emplace_back(map, raw);
    m.arrays.emplace_back(map + "_normalized", norm);
    write_map_container(out, m, png);
    nlohmann::json h{{"map", map}, {"bins", 10}, {"counts", unit_histogram(norm, 10)}};
    io::write_text(fs::path(out) / "histogram.json", h.dump(2) + "\n");
    return 0;
}

std::atomic<bool> g_stop{false};

int cmd_serve(const std::string& config, unsigned short port, const std::string& address, const std::string& id,
              const std::string& state_dir, const std::string& resume) {
    std::optional<Session> s;
    if (!resume.empty()) {
        s.emplace(Session::load(resume));
    } else {
        auto cfg = load_config(config);
        cfg.judge = JudgeMode::Human;
        cfg.validate();
        s.emplace(cfg);
    }
    ServiceOptions opt;
    if (!state_dir.empty()) opt.state_dir = fs::path(state_dir);
    ServiceRegistry reg;
    auto svc = reg.add(std::make_shared<FeedbackService>(id, std::move(*s), opt));
    server::Server srv(reg, port, address);
    srv.start();
    svc->start();
    std::fprintf(stderr, "feedbackd listening on http://%s:%u/api/session/%s/\n", address.c_str(), srv.port(),
                 id.c_str());
    std::signal(SIGINT, [](int) { g_stop = true; });
    std::signal(SIGTERM, [](int) { g_stop = true; });
    while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(100));
    svc->stop();
    srv.stop();
    return 0;
}

int cmd_synth(const std::string& kind, const std::string& out, std::uint64_t seed, std::optional<int> height,
              std::optional<int> width, bool png) {
    nlohmann::json spec{{"synthetic", kind}, {"seed", seed}};
    if (height) spec["height"] = *height;
    if (width) spec["width"] = *width;
    ExperimentConfig cfg;
    cfg.dataset = spec;
    save_dataset(resolve_dataset(cfg), out, png);
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"dkpl: preference-driven active learning over image patches"};
    app.require_subcommand(1);

    auto* run = app.add_subcommand("run", "run an oracle-judged experiment and export its trace");
    std::string config, variant, out = "out", checkpoint, resume;
    std::optional<std::uint64_t> seed;
    std::optional<int> stop_after;
    run->add_option("--config", config, "experiment config (JSON)");
    run->add_option("--variant", variant, "ablation switches, e.g. ties=on,weights=off");
    run->add_option("--seed", seed, "override the config seed");
    run->add_option("--out", out, "trace output directory");
    run->add_option("--checkpoint", checkpoint, "save the session here after every step");
    run->add_option("--resume", resume, "continue from a saved session directory");
    run->add_option("--stop-after", stop_after, "suspend after this many completed steps");

    auto* predict = app.add_subcommand("predict", "apply a saved model to a dataset");
    std::string model, dataset, pout;
    bool png = false;
    predict->add_option("--model", model, "model snapshot directory")->required();
    predict->add_option("--dataset", dataset, "dataset directory or dataset.json")->required();
    predict->add_option("--out", pout, "output directory")->required();
    predict->add_flag("--png", png, "also write PNG previews");

    auto* analyze = app.add_subcommand("analyze", "compute a ground-truth analysis map");
    std::string adataset, map, aout;
    int radius = 5, charge_radius = 3;
    double bin_width = 5.0;
    bool apng = false;
    analyze->add_option("--dataset", adataset, "dataset directory or dataset.json")->required();
    analyze->add_option("--map", map, "loop_area, char_angle or wall_charge")
        ->required()
        ->check(CLI::IsMember({"loop_area", "char_angle", "wall_charge"}));
    analyze->add_option("--out", aout, "output directory")->required();
    analyze->add_option("--radius", radius, "characteristic-angle radius (pixels)");
    analyze->add_option("--bin-width", bin_width, "characteristic-angle bin width (degrees)");
    analyze->add_option("--charge-radius", charge_radius, "wall-charge radius (pixels)");
    analyze->add_flag("--png", apng, "also write PNG previews");

    auto* serve = app.add_subcommand("serve", "start the feedback service for a human-judged session");
    std::string sconfig, address = "127.0.0.1", sid = "default", state_dir, sresume;
    unsigned short port = 8080;
    serve->add_option("--config", sconfig, "experiment config (JSON)");
    serve->add_option("--port", port, "TCP port (0 picks a free one)");
    serve->add_option("--address", address, "bind address");
    serve->add_option("--session-id", sid, "session id used in the URL");
    serve->add_option("--state-dir", state_dir, "checkpoint directory");
    serve->add_option("--resume", sresume, "continue from a saved session directory");

    auto* synth = app.add_subcommand("synth", "write a synthetic dataset");
    std::string kind, sout;
    std::uint64_t sseed = 1;
    std::optional<int> height, width;
    bool spng = false;
    synth->add_option("--kind", kind, "stripes, rhombohedral_walls or charged_walls")
        ->required()
        ->check(CLI::IsMember({"stripes", "rhombohedral_walls", "charged_walls"}));
    synth->add_option("--out", sout, "output directory")->required();
    synth->add_option("--seed", sseed, "noise seed");
    synth->add_option("--height", height, "grid height");
    synth->add_option("--width", width, "grid width");
    synth->add_flag("--png", spng, "also write PNG previews");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (*run) {
            if (config.empty() && resume.empty()) throw ConfigError("run needs --config or --resume");
            return cmd_run(config, variant, seed, out, checkpoint, resume, stop_after);
        }
        if (*predict) return cmd_predict(model, dataset, pout, png);
        if (*analyze) return cmd_analyze(adataset, map, aout, apng, radius, bin_width, charge_radius);
        if (*serve) {
            if (sconfig.empty() && sresume.empty()) throw ConfigError("serve needs --config or --resume");
            return cmd_serve(sconfig, port, address, sid, state_dir, sresume);
        }
        if (*synth) return cmd_synth(kind, sout, sseed, height, width, spng);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return exit_code_for(e);
    }
    return 0;
}
