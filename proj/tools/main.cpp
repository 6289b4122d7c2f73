#include <iostream>

#include <CLI11.hpp>

#include "lab.hpp"
#include "npad/runtime.hpp"

using namespace npad::lab;

int main(int argc, char** argv) {
    npad::retain_freed_memory();
    CLI::App app{"npad-lab: synthetic bias experiments, attribute selection, debiased training and fairness metrics"};
    app.require_subcommand(1);

    GenerateOptions gen;
    auto* g = app.add_subcommand("generate", "Generate a synthetic shapes dataset manifest");
    g->add_option("--spec", gen.spec, "Config file (TOML or JSON); dataset keys under data.*");
    g->add_option("--set", gen.sets, "Override a dotted key, e.g. data.n_train=2000");
    g->add_option("--seed", gen.seed, "Dataset seed");
    g->add_option("--out", gen.out, "Output directory")->required();
    g->add_flag("--export-ppm", gen.export_ppm, "Also write one PPM image per sample");

    SelectOptions sel;
    auto* s = app.add_subcommand("select", "Select non-protected attributes for a target");
    s->add_option("--data", sel.data, "Dataset directory")->required();
    s->add_option("--config", sel.config, "Config file");
    s->add_option("--set", sel.sets, "Override a dotted key");
    s->add_option("--target", sel.target, "Target attribute");
    s->add_option("--n", sel.n, "Number of attributes to select")->default_val(1);
    s->add_option("--alpha", sel.alpha, "Significance level of the independence test");
    s->add_flag("--no-independence", sel.no_independence, "Disable the independence gate");
    s->add_option("--seed", sel.seed, "Seed of the implicitly trained baseline");
    s->add_option("--baseline", sel.baseline, "Baseline checkpoint instead of training one");
    s->add_option("--out", sel.out, "Output directory")->default_val(".");

    TrainOptions tr;
    auto* t = app.add_subcommand("train", "Train one variant and evaluate it on the test split");
    t->add_option("--variant", tr.variant, "bmt, pad, npad1, npad2, dacl-only, frl-only or npad-dependent")
        ->required();
    t->add_option("--data", tr.data, "Dataset directory")->required();
    t->add_option("--config", tr.config, "Config file");
    t->add_option("--set", tr.sets, "Override a dotted key, e.g. stage1.learning_rate=2e-4");
    t->add_option("--target", tr.target, "Target attribute");
    t->add_option("--seed", tr.seed, "Training seed");
    t->add_option("--baseline", tr.baseline, "Baseline checkpoint for NPAD selection");
    t->add_option("--out", tr.out, "Run directory")->required();

    EvaluateOptions ev;
    auto* e = app.add_subcommand("evaluate", "Fairness report for a checkpoint or for confusion matrices");
    e->add_option("--model", ev.model, "Checkpoint");
    e->add_option("--data", ev.data, "Dataset directory");
    e->add_option("--protected", ev.protected_attributes, "Protected attribute(s)")->delimiter(',');
    e->add_option("--split", ev.split, "train, val or test")->default_val("test");
    e->add_option("--from-confusions", ev.from_confusions, "JSON with per-subgroup confusion counts");
    e->add_option("--out", ev.out, "Output directory")->required();

    CompareOptions cmp;
    auto* c = app.add_subcommand("compare", "Compare evaluated runs");
    c->add_option("--runs", cmp.runs, "Run directories")->required();
    c->add_option("--out", cmp.out, "Output directory")->default_val(".");

    ExperimentOptions ex;
    auto* x = app.add_subcommand("experiment", "Run variants over several seeds and compare them");
    x->add_option("--config", ex.config, "Config file");
    x->add_option("--set", ex.sets, "Override a dotted key");
    x->add_option("--variants", ex.variants, "Variants to run")->delimiter(',');
    x->add_option("--seeds", ex.seeds, "Seeds, e.g. 1-10 or 1,3,5")->default_val("1");
    x->add_option("--out", ex.out, "Output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& err) {
        return app.exit(err);
    } catch (const CLI::CallForAllHelp& err) {
        return app.exit(err);
    } catch (const CLI::ParseError& err) {
        app.exit(err);
        return 2;
    }

    try {
        if (g->parsed()) return cmd_generate(gen);
        if (s->parsed()) return cmd_select(sel);
        if (t->parsed()) return cmd_train(tr);
        if (e->parsed()) return cmd_evaluate(ev);
        if (c->parsed()) return cmd_compare(cmp);
        if (x->parsed()) return cmd_experiment(ex);
    } catch (const std::exception& err) {
        std::cerr << "error: " << err.what() << '\n';
        return exit_code_for(err);
    }
    return 2;
}
