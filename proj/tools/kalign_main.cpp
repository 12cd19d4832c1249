// kalign: train and evaluate knowledge-aligned language models on
// knowledge graphs with textual descriptions.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "kalign/checkpoint.hpp"
#include "kalign/diagnostics.hpp"
#include "kalign/kg_store.hpp"
#include "kalign/kgc_eval.hpp"
#include "kalign/kgqa_eval.hpp"
#include "kalign/synthetic.hpp"
#include "kalign/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::vector<std::string> read_text_lines(const fs::path& path) {
    std::ifstream in(path);
    kalign::require(in.good(), "cannot read " + path.string());
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line))
        if (!kalign::trim(line).empty()) lines.push_back(line);
    return lines;
}

void write_json(const fs::path& path, const json& j) {
    if (path.empty()) {
        std::cout << j.dump(2) << "\n";
        return;
    }
    std::ofstream out(path);
    kalign::require(out.good(), "cannot write " + path.string());
    out << j.dump(2) << "\n";
}

std::string single_line(std::string s) {
    for (char& c : s)
        if (c == '\n' || c == '\r' || c == '\t') c = ' ';
    return kalign::collapse_whitespace(s);
}

int cmd_gen_data(const std::string& out_dir, int groups, int group_size, int relations, int n_valid,
                 int n_test, std::uint64_t seed, int probe_sentences) {
    kalign::SyntheticKgOptions opts;
    opts.n_groups = groups;
    opts.group_size = group_size;
    opts.n_relations = relations;
    opts.n_valid = n_valid;
    opts.n_test = n_test;
    opts.seed = seed;
    kalign::KnowledgeGraph kg = kalign::make_synthetic_kg(opts);
    kalign::save_kg(kg, out_dir);

    {
        std::ofstream probe(fs::path(out_dir) / "probe.txt");
        for (const auto& s : kalign::make_probe_sentences(probe_sentences, 4, 8, seed))
            probe << s << "\n";
    }
    {
        // held-out language-modeling text: instruction renderings of the
        // validation triples, one per line
        std::ofstream held(fs::path(out_dir) / "heldout_text.txt");
        for (const auto& pair : kalign::make_pairs(kg.split(kalign::Split::Valid), kg)) {
            held << single_line(kalign::render_prompt_text(
                                    kalign::templates::kTripleCompletionInstruction, pair.hr_text) +
                                pair.t_text)
                 << "\n";
        }
    }
    std::cout << "wrote synthetic dataset to " << out_dir << ": |E|=" << kg.num_entities()
              << " |R|=" << kg.num_relations() << " train=" << kg.split(kalign::Split::Train).size()
              << " valid=" << kg.split(kalign::Split::Valid).size()
              << " test=" << kg.split(kalign::Split::Test).size() << "\n";
    return 0;
}

int cmd_train(const std::string& config_path, const std::string& resume_path) {
    kalign::TrainConfig cfg = kalign::load_train_config(config_path);
    kalign::TrainResult res;
    if (!resume_path.empty()) {
        kalign::Checkpoint ck = kalign::load_checkpoint(resume_path);
        res = kalign::resume(ck, cfg);
    } else {
        res = kalign::train(cfg);
    }
    if (!res.steps.empty()) {
        const auto& last = res.steps.back();
        std::cout << "finished at step " << last.step << ": L_exp=" << last.l_exp
                  << " L_imp=" << last.l_imp << " L_joint=" << last.l_joint << " tau=" << last.tau
                  << "\n";
    }
    if (!res.final_checkpoint.empty())
        std::cout << "final checkpoint: " << res.final_checkpoint.string() << "\n";
    return 0;
}

int cmd_eval_kgc(const std::string& ckpt_path, const std::string& data_dir, const std::string& split,
                 const std::string& json_out, const std::string& per_query_csv, bool pessimistic,
                 int block_size, long long max_queries) {
    kalign::Checkpoint ck = kalign::load_checkpoint(ckpt_path);
    kalign::KnowledgeGraph kg = kalign::augment_inverse(kalign::load_kg(data_dir));
    kalign::Split sp = split == "valid" ? kalign::Split::Valid : kalign::Split::Test;

    kalign::KgcEvalOptions opts;
    opts.pessimistic_ties = pessimistic;
    opts.block_size = block_size;
    opts.max_queries = max_queries;
    std::vector<kalign::QueryRecord> records;
    opts.records = &records;
    kalign::KgcMetrics m = kalign::evaluate_kgc(kg, ck.model, ck.vocab, sp, opts);

    json j{{"split", split},       {"queries", m.query_count}, {"MR", m.mr},
           {"MRR", m.mrr},         {"Hits@1", m.hits1},        {"Hits@3", m.hits3},
           {"Hits@10", m.hits10}};
    write_json(json_out, j);
    if (!per_query_csv.empty()) {
        std::ofstream csv(per_query_csv);
        kalign::require(csv.good(), "cannot write " + per_query_csv);
        csv << "triple,direction,rank\n";
        for (const auto& r : records) {
            csv << kg.entities[static_cast<std::size_t>(r.triple.head)].key << "|"
                << kg.relations[static_cast<std::size_t>(r.triple.relation)].key << "|"
                << kg.entities[static_cast<std::size_t>(r.triple.tail)].key << ","
                << (r.head_direction ? "head" : "tail") << "," << r.rank << "\n";
        }
    }
    return 0;
}

int cmd_eval_kgqa(const std::string& ckpt_path, const std::string& data_dir, const std::string& task,
                  int samples, int shots, int max_new, std::uint64_t seed,
                  const std::string& json_out, const std::string& transcript_csv) {
    kalign::Checkpoint ck = kalign::load_checkpoint(ckpt_path);
    kalign::KnowledgeGraph kg = kalign::augment_inverse(kalign::load_kg(data_dir));

    std::vector<kalign::QaTask> tasks;
    if (task == "all") {
        tasks = {kalign::QaTask::HeadPrediction, kalign::QaTask::TailPrediction,
                 kalign::QaTask::RelationPrediction, kalign::QaTask::TripleClassification};
    } else if (task == "head") {
        tasks = {kalign::QaTask::HeadPrediction};
    } else if (task == "tail") {
        tasks = {kalign::QaTask::TailPrediction};
    } else if (task == "relation") {
        tasks = {kalign::QaTask::RelationPrediction};
    } else if (task == "classification") {
        tasks = {kalign::QaTask::TripleClassification};
    } else {
        kalign::fail("unknown task '" + task + "'");
    }

    kalign::QaEvalOptions opts;
    opts.n_samples = samples;
    opts.k_shots = shots;
    opts.max_new = max_new;
    opts.seed = seed;

    std::vector<kalign::QaSample> all_samples;
    for (auto t : tasks) {
        auto s = kalign::build_qa_eval_set(kg, t, opts);
        all_samples.insert(all_samples.end(), s.begin(), s.end());
    }
    std::vector<std::string> outputs =
        kalign::decode_qa(ck.model, ck.vocab, all_samples, opts.max_new);
    kalign::QaScore sc = kalign::score_qa(all_samples, outputs);

    json j;
    for (const auto& [k, v] : sc.accuracy_by_task) {
        j[k] = {{"accuracy", v}, {"samples", sc.count_by_task.at(k)}};
    }
    write_json(json_out, j);

    if (!transcript_csv.empty()) {
        std::ofstream csv(transcript_csv);
        kalign::require(csv.good(), "cannot write " + transcript_csv);
        csv << "task,prompt_hash,gold,output,correct\n";
        for (std::size_t i = 0; i < all_samples.size(); ++i) {
            csv << kalign::qa_task_name(all_samples[i].task) << ","
                << kalign::fnv1a({all_samples[i].prompt}) << ",\"" << all_samples[i].gold << "\",\""
                << outputs[i] << "\"," << (sc.correct[i] ? 1 : 0) << "\n";
        }
    }
    return 0;
}

int cmd_diagnose(const std::vector<std::string>& ckpt_paths, const std::string& data_dir,
                 const std::string& sim_matrix_out, int sim_batch, const std::string& anisotropy_out,
                 const std::string& corpus_path, const std::string& theorems_out, double tau,
                 int mc_samples, std::uint64_t seed) {
    kalign::require(!ckpt_paths.empty(), "diagnose: at least one --ckpt is required");
    std::vector<kalign::Checkpoint> cks;
    for (const auto& p : ckpt_paths) cks.push_back(kalign::load_checkpoint(p));

    kalign::KnowledgeGraph kg = kalign::augment_inverse(kalign::load_kg(data_dir));
    const int max_len = 50;

    if (!sim_matrix_out.empty()) {
        auto pairs = kalign::make_pairs(kg.split(kalign::Split::Test), kg);
        kalign::require(static_cast<int>(pairs.size()) >= 2, "diagnose: not enough test pairs");
        if (static_cast<int>(pairs.size()) > sim_batch)
            pairs.resize(static_cast<std::size_t>(sim_batch));
        auto ex = kalign::export_similarity_matrix(pairs, cks.front().model, cks.front().vocab,
                                                   max_len, sim_matrix_out);
        std::cout << "similarity matrix " << ex.matrix.rows() << "x" << ex.matrix.cols()
                  << " diag_mean=" << ex.diag_mean << " offdiag_mean=" << ex.offdiag_mean << " -> "
                  << sim_matrix_out << "\n";
    }

    std::vector<std::string> corpus;
    if (!corpus_path.empty()) {
        corpus = read_text_lines(corpus_path);
    } else {
        for (const auto& p : kalign::make_pairs(kg.split(kalign::Split::Valid), kg))
            corpus.push_back(p.t_text);
    }

    if (!anisotropy_out.empty()) {
        std::vector<kalign::LayerCurveRow> rows;
        for (std::size_t c = 0; c < cks.size(); ++c) {
            auto values = kalign::anisotropy_per_layer(cks[c].model, cks[c].vocab, corpus,
                                                       kalign::View::T, max_len);
            for (std::size_t l = 0; l < values.size(); ++l)
                rows.push_back({fs::path(ckpt_paths[c]).filename().string(),
                                static_cast<std::int32_t>(l + 1), values[l]});
        }
        kalign::write_layer_curves_csv(rows, anisotropy_out);
        std::cout << "anisotropy curves for " << cks.size() << " checkpoint(s) -> " << anisotropy_out
                  << "\n";
    }

    if (!theorems_out.empty()) {
        const auto& ck = cks.front();
        kalign::MatD corpus_emb =
            kalign::embed_batch(ck.model, ck.vocab, corpus, kalign::View::T, max_len);
        std::vector<kalign::TheoremCheck> checks;
        for (double t : {0.05, 0.5, 1.0}) checks.push_back(kalign::anisotropy_bound_check(corpus_emb, t));

        auto pairs = kalign::make_pairs(kg.split(kalign::Split::Valid), kg);
        std::vector<std::string> hr_texts, t_texts;
        for (const auto& p : pairs) {
            hr_texts.push_back(p.hr_text);
            t_texts.push_back(p.t_text);
        }
        kalign::MatD e_hr = kalign::embed_batch(ck.model, ck.vocab, hr_texts, kalign::View::HR, max_len);
        kalign::MatD e_t = kalign::embed_batch(ck.model, ck.vocab, t_texts, kalign::View::T, max_len);
        auto series = kalign::asymptotic_gap(e_hr, e_t, corpus_emb, tau, {4, 16, 64, 256}, mc_samples,
                                             seed);
        for (const auto& pt : series.points) {
            kalign::TheoremCheck c;
            c.name = "asymptotic_gap";
            c.lhs = pt.gap;
            c.rhs = series.limit;
            c.slack = pt.gap - series.limit;
            c.params = "tau=" + std::to_string(tau) + ";N=" + std::to_string(pt.n_negatives);
            checks.push_back(c);
        }
        kalign::write_theorem_checks_csv(checks, theorems_out);
        std::cout << "theorem checks -> " << theorems_out << "\n";
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"knowledge-aligned language modeling at desk scale"};
    app.require_subcommand(1);

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "generate a synthetic KG dataset with descriptions");
    std::string gen_out;
    int gen_groups = 20, gen_group_size = 10, gen_relations = 8, gen_valid = 50, gen_test = 50,
        gen_probe = 100;
    std::uint64_t gen_seed = 7;
    gen->add_option("--out", gen_out, "output directory")->required();
    gen->add_option("--groups", gen_groups);
    gen->add_option("--group-size", gen_group_size);
    gen->add_option("--relations", gen_relations);
    gen->add_option("--valid", gen_valid);
    gen->add_option("--test", gen_test);
    gen->add_option("--seed", gen_seed);
    gen->add_option("--probe-sentences", gen_probe);

    // train
    auto* tr = app.add_subcommand("train", "train with the joint alignment objective");
    std::string tr_config, tr_resume;
    tr->add_option("--config", tr_config, "flat key-value config file")->required();
    tr->add_option("--resume", tr_resume, "checkpoint to continue from");

    // eval-kgc
    auto* ekgc = app.add_subcommand("eval-kgc", "filtered link-prediction evaluation");
    std::string ekgc_ckpt, ekgc_data, ekgc_split = "test", ekgc_json, ekgc_csv;
    bool ekgc_pessimistic = false;
    int ekgc_block = 4096;
    long long ekgc_max_queries = 0;
    ekgc->add_option("--ckpt", ekgc_ckpt)->required();
    ekgc->add_option("--data", ekgc_data)->required();
    ekgc->add_option("--split", ekgc_split)->check(CLI::IsMember({"test", "valid"}));
    ekgc->add_option("--json", ekgc_json, "metrics JSON path (stdout if omitted)");
    ekgc->add_option("--per-query", ekgc_csv, "per-query CSV path");
    ekgc->add_flag("--pessimistic", ekgc_pessimistic, "count ties against the gold entity");
    ekgc->add_option("--block-size", ekgc_block);
    ekgc->add_option("--max-queries", ekgc_max_queries);

    // eval-kgqa
    auto* ekgqa = app.add_subcommand("eval-kgqa", "generation-based QA evaluation");
    std::string qa_ckpt, qa_data, qa_task = "all", qa_json, qa_csv;
    int qa_samples = 200, qa_shots = 2, qa_max_new = 12;
    std::uint64_t qa_seed = 0;
    ekgqa->add_option("--ckpt", qa_ckpt)->required();
    ekgqa->add_option("--data", qa_data)->required();
    ekgqa->add_option("--task", qa_task)
        ->check(CLI::IsMember({"all", "head", "tail", "relation", "classification"}));
    ekgqa->add_option("--samples", qa_samples);
    ekgqa->add_option("--shots", qa_shots);
    ekgqa->add_option("--max-new", qa_max_new);
    ekgqa->add_option("--seed", qa_seed);
    ekgqa->add_option("--json", qa_json);
    ekgqa->add_option("--transcript", qa_csv);

    // diagnose
    auto* diag = app.add_subcommand("diagnose", "representation diagnostics and exports");
    std::vector<std::string> diag_ckpts;
    std::string diag_data, diag_sim, diag_aniso, diag_corpus, diag_theorems;
    int diag_sim_batch = 16, diag_mc = 2000;
    double diag_tau = 0.05;
    std::uint64_t diag_seed = 0;
    diag->add_option("--ckpt", diag_ckpts, "checkpoint(s); repeat for epoch curves")->required();
    diag->add_option("--data", diag_data)->required();
    diag->add_option("--sim-matrix", diag_sim, "write a held-out similarity matrix CSV");
    diag->add_option("--sim-batch", diag_sim_batch);
    diag->add_option("--anisotropy", diag_aniso, "write per-layer anisotropy CSV");
    diag->add_option("--corpus", diag_corpus, "probe corpus (defaults to valid tail texts)");
    diag->add_option("--theorems", diag_theorems, "write theorem-check CSV");
    diag->add_option("--tau", diag_tau);
    diag->add_option("--mc-samples", diag_mc);
    diag->add_option("--seed", diag_seed);

    // export-vocab
    auto* ev = app.add_subcommand("export-vocab", "write the checkpoint vocabulary, one token per line");
    std::string ev_ckpt, ev_out;
    ev->add_option("--ckpt", ev_ckpt)->required();
    ev->add_option("--out", ev_out)->required();

    // ppl
    auto* ppl = app.add_subcommand("ppl", "toy perplexity of a checkpoint over a text file");
    std::string ppl_ckpt, ppl_text;
    int ppl_max_len = 256;
    ppl->add_option("--ckpt", ppl_ckpt)->required();
    ppl->add_option("--text", ppl_text)->required();
    ppl->add_option("--max-len", ppl_max_len);

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed())
            return cmd_gen_data(gen_out, gen_groups, gen_group_size, gen_relations, gen_valid,
                                gen_test, gen_seed, gen_probe);
        if (tr->parsed()) return cmd_train(tr_config, tr_resume);
        if (ekgc->parsed())
            return cmd_eval_kgc(ekgc_ckpt, ekgc_data, ekgc_split, ekgc_json, ekgc_csv,
                                ekgc_pessimistic, ekgc_block, ekgc_max_queries);
        if (ekgqa->parsed())
            return cmd_eval_kgqa(qa_ckpt, qa_data, qa_task, qa_samples, qa_shots, qa_max_new, qa_seed,
                                 qa_json, qa_csv);
        if (diag->parsed())
            return cmd_diagnose(diag_ckpts, diag_data, diag_sim, diag_sim_batch, diag_aniso,
                                diag_corpus, diag_theorems, diag_tau, diag_mc, diag_seed);
        if (ev->parsed()) {
            kalign::Checkpoint ck = kalign::load_checkpoint(ev_ckpt);
            kalign::save_vocab(ck.vocab, ev_out);
            std::cout << "wrote " << ck.vocab.size() << " tokens to " << ev_out << "\n";
            return 0;
        }
        if (ppl->parsed()) {
            kalign::Checkpoint ck = kalign::load_checkpoint(ppl_ckpt);
            double v = kalign::toy_perplexity(ck.model, ck.vocab, read_text_lines(ppl_text),
                                              ppl_max_len);
            std::cout << "perplexity " << v << "\n";
            return 0;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
