#include <cstdlib>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "askbuild/askbuild.hpp"

namespace {

using namespace askbuild;

nlohmann::json read_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open " + path);
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(path + ": " + e.what());
    }
}

void write_text(const std::string& path, const std::string& text) {
    if (path == "-") {
        std::cout << text;
        return;
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ConfigError("cannot write " + path);
    out << text;
}

std::vector<Sample> of_split(const std::vector<Sample>& all, Split s) {
    std::vector<Sample> out;
    for (const auto& x : all) {
        if (x.split == s) out.push_back(x);
    }
    return out;
}

struct TrainArgs {
    std::string task = "building";
    std::string data;
    std::string config;
    std::string out;
    std::string log;
    std::string embeddings;
    std::size_t min_count = 2;
    std::uint64_t seed = 0;
    bool seed_set = false;
};

int run_train(const TrainArgs& a) {
    auto task = parse_task(a.task);
    if (!task) throw ConfigError("unknown task " + a.task);
    TaskSpec spec = TaskSpec::of(*task);
    ModelConfig mc;
    TrainConfig tc;
    if (!a.config.empty()) {
        auto j = read_json_file(a.config);
        if (j.contains("model")) mc = ModelConfig::from_json(j["model"]);
        if (j.contains("train")) tc = TrainConfig::from_json(j["train"]);
        if (j.contains("loss_weights")) {
            const auto& w = j["loss_weights"];
            spec.weights = {w.value("location", spec.weights.location), w.value("color", spec.weights.color),
                            w.value("type", spec.weights.type)};
            spec.validate();
        }
    }
    if (a.seed_set) tc.seed = a.seed;
    auto all = parse_corpus(a.data);
    auto train_set = of_split(all, Split::Train);
    auto valid_set = of_split(all, Split::Valid);
    Vocabulary vocab = build_vocab(train_set, a.min_count);

    std::ofstream log;
    if (!a.log.empty()) {
        log.open(a.log, std::ios::binary);
        if (!log) throw ConfigError("cannot write " + a.log);
    }
    std::cerr << "train: " << train_set.size() << " train / " << valid_set.size() << " valid samples, vocabulary "
              << vocab.size() << ", task " << to_string(spec.task) << "\n";
    BuilderModel init = BuilderModel::create(mc, spec, vocab, tc.seed);
    if (!a.embeddings.empty()) {
        std::ifstream emb(a.embeddings);
        if (!emb) throw ConfigError("cannot open " + a.embeddings);
        std::size_t found = load_embeddings(emb, init.vocab, init.params.at("embedding"));
        std::cerr << "embeddings: " << found << " of " << vocab.size() << " tokens found\n";
    }
    TrainResult r = train_from(std::move(init), train_set, valid_set, tc, [&](const EpochLog& e) {
        std::string line = e.to_json().dump();
        if (log) log << line << "\n" << std::flush;
        std::cerr << line << "\n";
    });
    BuilderModel best = std::move(r.best);
    for (const auto& w : r.warnings) std::cerr << "warning: " << w << "\n";
    best.save(a.out);
    std::cerr << "best epoch " << r.best_epoch << " (validation metric " << r.best_metric << "), saved " << a.out << "\n";
    return 0;
}

struct EvalArgs {
    std::string ckpt;
    std::string data;
    std::string split = "test";
    std::string predictions_in;
    std::string predictions_out;
    std::string report;
    std::string task = "building";
    std::size_t max_steps = kDefaultMaxSteps;
    bool step_accuracy = false;
};

int run_eval(const EvalArgs& a) {
    EvalReport rep;
    if (!a.predictions_in.empty()) {
        std::ifstream in(a.predictions_in);
        if (!in) throw ConfigError("cannot open " + a.predictions_in);
        if (!parse_task(a.task)) throw ConfigError("unknown task " + a.task);
        rep = score_records(read_prediction_log(in), a.task);
    } else {
        if (a.ckpt.empty() || a.data.empty()) throw ConfigError("eval needs --ckpt and --data, or --predictions");
        auto split = parse_split(a.split);
        if (!split) throw ConfigError("unknown split " + a.split);
        BuilderModel m = BuilderModel::load(a.ckpt);
        auto samples = of_split(parse_corpus(a.data), *split);
        std::vector<PredictionRecord> records;
        rep = evaluate_model(m, samples, {a.max_steps, a.step_accuracy}, &records);
        if (!a.predictions_out.empty()) {
            std::string text;
            for (const auto& r : records) text += r.to_json().dump() + "\n";
            write_text(a.predictions_out, text);
        }
    }
    std::cout << format_report(rep);
    if (!a.report.empty()) write_text(a.report, rep.to_json().dump(2) + "\n");
    return 0;
}

int run_data_stats(const std::string& data, const std::string& json_out) {
    auto samples = parse_corpus(data);
    auto tax = taxonomy_stats(samples);
    auto splits = split_stats(samples);
    std::cout << "Builder utterance taxonomy\n" << format_taxonomy_table(tax) << "\nExtended dataset\n"
              << format_split_table(splits);
    if (!json_out.empty()) {
        nlohmann::json j = {{"taxonomy", taxonomy_to_json(tax)}, {"splits", splits_to_json(splits)}};
        write_text(json_out, j.dump(2) + "\n");
    }
    return 0;
}

int run_synth(std::size_t n, std::uint64_t seed, const std::string& out, const std::string& grammar) {
    GrammarConfig g;
    if (!grammar.empty()) {
        auto j = read_json_file(grammar);
        try {
            if (j.contains("label_mix")) g.label_mix = j["label_mix"].get<std::array<double, 3>>();
            g.round_robin_labels = j.value("round_robin_labels", g.round_robin_labels);
            g.max_initial_blocks = j.value("max_initial_blocks", g.max_initial_blocks);
            g.max_run_length = j.value("max_run_length", g.max_run_length);
            g.allow_removal = j.value("allow_removal", g.allow_removal);
            g.allow_rows = j.value("allow_rows", g.allow_rows);
            g.allow_towers = j.value("allow_towers", g.allow_towers);
            g.prior_turn_prob = j.value("prior_turn_prob", g.prior_turn_prob);
            if (j.contains("split_fractions")) g.split_fractions = j["split_fractions"].get<std::array<double, 3>>();
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError(std::string("grammar config: ") + e.what());
        }
    }
    write_text(out, serialize_jsonl(synth_generate(n, seed, g)));
    return 0;
}

int run_play(const std::string& ckpt, unsigned short port, const std::string& address, const std::string& assets,
             std::size_t max_steps) {
    if (const char* env = std::getenv("PORT")) port = static_cast<unsigned short>(std::stoul(env));
    auto model = std::make_shared<BuilderModel>(BuilderModel::load(ckpt));
    auto predictor = std::shared_ptr<const Predictor>(new Predictor(predictor_for(*model)), [model](const Predictor* p) { delete p; });
    PlayServer server(predictor, {address, port, assets, max_steps});
    unsigned short bound = server.start();
    std::cerr << "play: listening on http://" << address << ":" << bound << " (WebSocket on the same port)\n";
    server.wait();
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Grounded builder agent: training, evaluation, data tools and the play service"};
    app.require_subcommand(1);
    std::uint64_t seed = 0;

    TrainArgs ta;
    auto* train_cmd = app.add_subcommand("train", "train a model");
    train_cmd->add_option("--task", ta.task, "building | ask | joint")->check(CLI::IsMember({"building", "ask", "joint"}));
    train_cmd->add_option("--data", ta.data, "JSONL file or directory")->required();
    train_cmd->add_option("--config", ta.config, "JSON with optional \"model\" and \"train\" objects");
    train_cmd->add_option("--out", ta.out, "checkpoint path")->required();
    train_cmd->add_option("--log", ta.log, "epoch log (JSONL)");
    train_cmd->add_option("--min-count", ta.min_count, "vocabulary frequency threshold");
    train_cmd->add_option("--embeddings", ta.embeddings, "pre-trained vectors, one \"token v1 ... vd\" per line");
    auto* seed_opt = train_cmd->add_option("--seed", ta.seed, "overrides train.seed");

    EvalArgs ea;
    std::uint64_t eval_seed = 0;
    auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint or re-score a prediction log");
    eval_cmd->add_option("--ckpt", ea.ckpt);
    eval_cmd->add_option("--data", ea.data);
    eval_cmd->add_option("--split", ea.split)->check(CLI::IsMember({"train", "valid", "test"}));
    eval_cmd->add_option("--predictions", ea.predictions_in, "re-score this prediction log instead of running a model");
    eval_cmd->add_option("--task", ea.task, "task of the prediction log")->check(CLI::IsMember({"building", "ask", "joint"}));
    eval_cmd->add_option("--predictions-out", ea.predictions_out, "write the prediction log (JSONL)");
    eval_cmd->add_option("--report", ea.report, "write the JSON report");
    eval_cmd->add_option("--max-steps", ea.max_steps);
    eval_cmd->add_flag("--step-accuracy", ea.step_accuracy, "also report teacher-forced step accuracy");
    eval_cmd->add_option("--seed", eval_seed);

    std::string stats_data, stats_json;
    std::uint64_t stats_seed = 0;
    auto* stats_cmd = app.add_subcommand("data-stats", "taxonomy and split statistics");
    stats_cmd->add_option("--data", stats_data)->required();
    stats_cmd->add_option("--json", stats_json, "also write JSON (\"-\" for stdout)");
    stats_cmd->add_option("--seed", stats_seed);

    std::size_t synth_n = 100;
    std::string synth_out, synth_grammar;
    auto* synth_cmd = app.add_subcommand("synth", "generate a synthetic corpus");
    synth_cmd->add_option("--n", synth_n)->required();
    synth_cmd->add_option("--out", synth_out, "output JSONL (\"-\" for stdout)")->required();
    synth_cmd->add_option("--grammar", synth_grammar, "grammar config JSON");
    synth_cmd->add_option("--seed", seed);

    std::string play_ckpt, play_address = "127.0.0.1", play_assets;
    unsigned short play_port = 8080;
    std::size_t play_steps = kDefaultMaxSteps;
    std::uint64_t play_seed = 0;
    auto* play_cmd = app.add_subcommand("play", "serve the interactive console");
    play_cmd->add_option("--ckpt", play_ckpt)->required();
    play_cmd->add_option("--port", play_port, "overridden by $PORT");
    play_cmd->add_option("--address", play_address);
    play_cmd->add_option("--assets", play_assets, "console build directory");
    play_cmd->add_option("--max-steps", play_steps);
    play_cmd->add_option("--seed", play_seed);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n\n" << app.help();
        return 2;
    }

    try {
        if (*train_cmd) {
            ta.seed_set = seed_opt->count() > 0;
            return run_train(ta);
        }
        if (*eval_cmd) return run_eval(ea);
        if (*stats_cmd) return run_data_stats(stats_data, stats_json);
        if (*synth_cmd) return run_synth(synth_n, seed, synth_out, synth_grammar);
        if (*play_cmd) return run_play(play_ckpt, play_port, play_address, play_assets, play_steps);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 1;
}
