// SPDX-License-Identifier: Apache-2.0
//
// restune CLI: equivalence verification, desk-scale training, multi-task
// inference counting, and report consolidation. See README.md for the
// config format. Exit codes: 0 success, 1 verification failure, 2 usage or
// config error.

#include <exception>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "restune/commands.hpp"

int main(int argc, char** argv) {
    CLI::App app{"Res-Tuning desk-scale toolkit: unbound tuners, bypass, and the equivalence battery"};
    app.require_subcommand(1);

    // verify
    auto* verify = app.add_subcommand("verify", "run the unbinding equivalence suite");
    restune::VerifyOptions vopts;
    verify->add_option("--trials", vopts.trials, "random trials per identity (default 100)");
    verify->add_option("--seed", vopts.seed, "root seed for instance draws");
    verify->add_option("--tolerance", vopts.tolerance, "max abs diff allowed for the attention identities");
    verify->add_option("--inputs", vopts.agreement_inputs, "inputs for the argmax-agreement check (default 500)");
    verify->add_option("--out", vopts.out, "CSV report path (default verify.csv)");

    // train
    auto* train = app.add_subcommand("train", "train one mode on a synthetic task");
    std::string train_config, train_mode;
    train->add_option("--config", train_config, "JSON run config")->required();
    train->add_option("--mode", train_mode, "override config mode: linear|plan|bypass|full");

    // multitask
    auto* multitask = app.add_subcommand("multitask", "count backbone forwards: bypass vs embedded baseline");
    restune::MultitaskOptions mopts;
    multitask->add_option("--config", mopts.config_path, "JSON run config")->required();
    multitask->add_option("--tasks", mopts.tasks, "number of tasks (default 19)");
    multitask->add_option("--out", mopts.out, "CSV report path (default multitask.csv)");

    // report
    auto* report = app.add_subcommand("report", "merge summary CSVs into one table");
    std::vector<std::string> report_paths;
    std::string report_out;
    report->add_option("paths", report_paths, "summary CSV files")->required();
    report->add_option("--out", report_out, "merged CSV path (default report.csv)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e); // --help
        app.exit(e);
        return 2;
    }

    try {
        if (*verify) return restune::cmd_verify(vopts, std::cout);
        if (*train) return restune::cmd_train(train_config, train_mode, std::cout);
        if (*multitask) return restune::cmd_multitask(mopts, std::cout);
        if (*report) return restune::cmd_report(report_paths, report_out, std::cout);
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
    return 2;
}
