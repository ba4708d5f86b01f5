#pragma once

// Full question-answering model: projected visual features pass through the
// dictionary-based attention stage, the question is split into role streams,
// every stream runs the spatial-temporal stacks, and the fusion stage with a
// task-specific head turns the stream summaries into an answer and a loss.
// Ablation flags rewire the graph; disabled stages register no parameters.

#include "cvqa/feature_store.hpp"
#include "cvqa/fusion.hpp"
#include "cvqa/intervention.hpp"
#include "cvqa/linguistic.hpp"
#include "cvqa/nn.hpp"
#include "cvqa/stt.hpp"
#include "cvqa/types.hpp"

#include <array>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

namespace cvqa::model {

struct AblationSpec {
  bool disable_hsrp = false;
  bool disable_lbci = false;
  bool disable_vfci = false;
  bool disable_cvlr = false;
  bool disable_sge = false;
  bool disable_alff = false;

  bool hsrp_on() const { return !disable_hsrp; }
  bool lbci_on() const { return !(disable_lbci || disable_cvlr); }
  bool vfci_on() const { return !(disable_vfci || disable_cvlr); }
  bool sge_on() const { return !disable_sge; }
  bool alff_on() const { return !disable_alff; }
};

struct ModelHyper {
  Eigen::Index d = 512;
  int heads = 8;
  int depth = 3;        // transformer blocks per stack
  int graph_depth = 1;  // fusion graph layers
  int codebook = 512;   // dictionary rows per visual modality
  int text_layers = 1;
  bool share_streams = true;
  bool prior_weighted = false;
  AblationSpec ablation;
};

template <class S>
struct SampleForward {
  nn::Var<S> output;  // probabilities (1xA), scores (1xC) or value (1x1)
  nn::Var<S> loss;    // scalar training loss
  int prediction = -1;
};

template <class S>
class VqaModel {
 public:
  ModelHyper hyper;
  data::TaskType task = data::TaskType::OpenEnded;
  int n_streams = 4;
  lang::Tokenizer tokenizer;

  nn::Linear<S> proj_app, proj_mot;
  std::optional<intervention::FrontDoor<S>> front_app, front_mot;
  lang::TextEncoder<S> text;
  stt::SpatialTemporalTransformer<S> reason;
  fusion::SemanticGcn<S> graph;
  std::optional<fusion::AdaptiveFusion<S>> gates;
  fusion::VisualConditioner<S> cond;
  std::optional<fusion::OpenEndedHead<S>> open_head;
  std::optional<fusion::ScalarHead<S>> scalar_head;  // choice scorer / count
  std::vector<double> stream_weights;  // entropy scalars, prior-weighted mode

  static VqaModel create(nn::ParameterStore<S>& ps, const ModelHyper& hyper,
                         const data::DatasetManifest& manifest) {
    VqaModel m;
    m.hyper = hyper;
    m.task = manifest.task;
    m.n_streams = hyper.ablation.hsrp_on() ? 4 : 1;
    const Eigen::Index d = hyper.d;

    std::vector<std::string> corpus;
    std::vector<lang::QuestionBundle> bundles;
    for (const auto& e : manifest.entries) {
      if (e.split != "train") continue;
      corpus.push_back(e.question);
      for (const auto& c : e.choices) corpus.push_back(c);
      bundles.push_back(lang::bundle_question(e.question));
    }
    CVQA_REQUIRE(!corpus.empty(), ValidationError,
                 "manifest has no training entries");
    m.tokenizer = lang::Tokenizer::build(corpus);

    m.proj_app =
        nn::Linear<S>::create(ps, "proj.app", manifest.d_app_raw, d);
    m.proj_mot =
        nn::Linear<S>::create(ps, "proj.mot", manifest.d_mot_raw, d);
    if (hyper.ablation.vfci_on()) {
      CVQA_REQUIRE(hyper.codebook >= 1, ConfigError,
                   "dictionary needs at least one row");
      intervention::FrontDoor<S> fa, fm;
      fa.lgcam = intervention::Lgcam<S>::create(ps, "front.app", d);
      fa.codebook = &ps.zeros("front.app.codebook", hyper.codebook, d);
      fm.lgcam = intervention::Lgcam<S>::create(ps, "front.mot", d);
      fm.codebook = &ps.zeros("front.mot.codebook", hyper.codebook, d);
      m.front_app = fa;
      m.front_mot = fm;
    }
    m.text = lang::TextEncoder<S>::create(ps, "text", m.tokenizer.vocab_size(),
                                          d, d, hyper.text_layers, hyper.heads);
    m.reason = stt::SpatialTemporalTransformer<S>::create(
        ps, "stt", d, hyper.heads, hyper.depth,
        static_cast<Eigen::Index>(manifest.n_clips) * manifest.t_frames,
        manifest.n_clips, m.n_streams, hyper.share_streams);
    m.graph = fusion::SemanticGcn<S>::create(
        ps, "graph", 2 * d, hyper.ablation.sge_on() ? hyper.graph_depth : 0);
    if (hyper.ablation.alff_on())
      m.gates = fusion::AdaptiveFusion<S>::create(ps, "gates", 2 * d, d,
                                                  m.n_streams);
    m.cond = fusion::VisualConditioner<S>::create(ps, "cond", 2 * d);

    const Eigen::Index joint = static_cast<Eigen::Index>(m.n_streams) * 4 * d;
    switch (m.task) {
      case data::TaskType::OpenEnded:
        m.open_head = fusion::OpenEndedHead<S>::create(
            ps, "head.open", joint, 2 * d,
            static_cast<Eigen::Index>(manifest.answer_space.size()));
        break;
      case data::TaskType::MultiChoice:
        m.scalar_head = fusion::ScalarHead<S>::create(ps, "head.choice", joint);
        break;
      case data::TaskType::Count:
        m.scalar_head = fusion::ScalarHead<S>::create(ps, "head.count", joint);
        break;
    }

    // disabling the linguistic intervention turns the prior machinery off
    if (hyper.prior_weighted && hyper.ablation.lbci_on()) {
      const auto vocab = intervention::build_confounder_vocabulary(bundles);
      if (m.n_streams == 4)
        for (size_t k = 0; k < 4; ++k)
          m.stream_weights.push_back(vocab.entropy_weight(k));
      else
        m.stream_weights.push_back(vocab.entropy_weight(0));
    }
    return m;
  }

  // Cluster the projected training features into the dictionaries. No-op
  // when the front-door stage is disabled.
  void init_codebooks(const data::DatasetManifest& manifest,
                      const std::string& data_dir, std::uint64_t seed,
                      Eigen::Index max_rows = 4096) {
    if (!front_app) return;
    const Mat app_w = proj_app.w->value.template cast<double>();
    const Mat mot_w = proj_mot.w->value.template cast<double>();
    const Eigen::RowVectorXd app_b =
        proj_app.b->value.row(0).template cast<double>();
    const Eigen::RowVectorXd mot_b =
        proj_mot.b->value.row(0).template cast<double>();
    std::vector<Mat> app_rows, mot_rows;
    for (const auto& e : manifest.entries) {
      if (e.split != "train") continue;
      const auto rec = data::read_feature_file(data_dir + "/" + e.features_path);
      app_rows.push_back(
          (rec.appearance.template cast<double>() * app_w).rowwise() + app_b);
      mot_rows.push_back(
          (rec.motion.template cast<double>() * mot_w).rowwise() + mot_b);
    }
    CVQA_REQUIRE(!app_rows.empty(), ValidationError,
                 "dictionary needs training features");
    front_app->codebook->value =
        cluster(app_rows, hyper.codebook, mix_seed(seed, 0xA), max_rows)
            .template cast<S>();
    front_mot->codebook->value =
        cluster(mot_rows, hyper.codebook, mix_seed(seed, 0xB), max_rows)
            .template cast<S>();
  }

  SampleForward<S> forward(nn::Tape<S>& tape, const data::FeatureRecord& rec,
                           const data::ManifestEntry& entry,
                           std::uint64_t sample_seed,
                           const nn::DropoutCtx<S>& drop,
                           nn::ForwardTrace<S>* trace = nullptr) const {
    nn::Var<S> fc_app, fc_mot;
    visual_tokens(tape, rec, sample_seed, trace, fc_app, fc_mot);

    // role streams never depend on the candidate text
    const auto spans = stream_spans(entry.question);
    std::vector<stt::SttOutput<S>> fixed;
    for (int k = 1; k < n_streams; ++k)
      fixed.push_back(run_stream(tape, k, spans[static_cast<size_t>(k)],
                                 fc_app, fc_mot, drop, trace));

    SampleForward<S> out;
    if (task == data::TaskType::MultiChoice) {
      const int c = static_cast<int>(entry.choices.size());
      CVQA_REQUIRE(c >= 2, ValidationError,
                   "multi-choice sample needs at least two candidates");
      CVQA_REQUIRE(entry.answer >= 0 && entry.answer < c, ValidationError,
                   "no valid correct candidate for sample " + entry.id);
      std::vector<nn::Var<S>> scores;
      for (int i = 0; i < c; ++i) {
        std::vector<stt::SttOutput<S>> streams;
        streams.push_back(
            run_stream(tape, 0, entry.question + " " + entry.choices[static_cast<size_t>(i)],
                       fc_app, fc_mot, drop, trace));
        for (const auto& f : fixed) streams.push_back(f);
        nn::Var<S> joint = fuse(streams, trace);
        scores.push_back((*scalar_head)(joint));
      }
      out.output = ad::concat_cols(scores);
      out.loss = fusion::hinge_ranking(out.output, entry.answer);
      Eigen::Index best = 0;
      out.output.value().row(0).maxCoeff(&best);
      out.prediction = static_cast<int>(best);
      return out;
    }

    std::vector<stt::SttOutput<S>> streams;
    streams.push_back(
        run_stream(tape, 0, entry.question, fc_app, fc_mot, drop, trace));
    for (const auto& f : fixed) streams.push_back(f);
    nn::Var<S> joint = fuse(streams, trace);
    if (task == data::TaskType::OpenEnded) {
      out.output = open_head->probs(joint, trace, "head");
      out.loss = fusion::cross_entropy(out.output, entry.answer);
      Eigen::Index best = 0;
      out.output.value().row(0).maxCoeff(&best);
      out.prediction = static_cast<int>(best);
    } else {
      out.output = (*scalar_head)(joint);
      out.loss = fusion::squared_error(out.output,
                                       static_cast<S>(entry.answer));
      out.prediction = fusion::clamp_count(
          static_cast<double>(out.output.value()(0, 0)));
    }
    return out;
  }

 private:
  static Mat cluster(const std::vector<Mat>& blocks, int k, std::uint64_t seed,
                     Eigen::Index max_rows) {
    Eigen::Index total = 0;
    for (const auto& b : blocks) total += b.rows();
    Mat pool(total, blocks[0].cols());
    Eigen::Index at = 0;
    for (const auto& b : blocks) {
      pool.middleRows(at, b.rows()) = b;
      at += b.rows();
    }
    if (total > max_rows) {
      Rng rng = named_stream(seed, "codebook.subsample");
      Mat sub(max_rows, pool.cols());
      // partial Fisher-Yates over row indices
      std::vector<Eigen::Index> idx(static_cast<size_t>(total));
      std::iota(idx.begin(), idx.end(), 0);
      for (Eigen::Index i = 0; i < max_rows; ++i) {
        const auto j = i + static_cast<Eigen::Index>(uniform_index(
                               rng, static_cast<std::uint64_t>(total - i)));
        std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(j)]);
        sub.row(i) = pool.row(idx[static_cast<size_t>(i)]);
      }
      pool = std::move(sub);
    }
    return intervention::kmeans(pool, k, seed).centroids;
  }

  std::array<std::string, 4> stream_spans(const std::string& question) const {
    if (n_streams == 1) return {question, "", "", ""};
    const auto roles = lang::parse_roles(question);
    return {question, roles.subject, roles.action, roles.object};
  }

  void visual_tokens(nn::Tape<S>& tape, const data::FeatureRecord& rec,
                     std::uint64_t sample_seed, nn::ForwardTrace<S>* trace,
                     nn::Var<S>& fc_app, nn::Var<S>& fc_mot) const {
    nn::Var<S> fl_app =
        proj_app(tape.constant(rec.appearance.template cast<S>()));
    nn::Var<S> fl_mot = proj_mot(tape.constant(rec.motion.template cast<S>()));
    if (front_app) {
      fc_app = (*front_app)(fl_app, mix_seed(sample_seed, 0xA), trace,
                            "front.app");
      fc_mot = (*front_mot)(fl_mot, mix_seed(sample_seed, 0xB), trace,
                            "front.mot");
    } else {
      fc_app = ad::concat_cols(fl_app, fl_app);
      fc_mot = ad::concat_cols(fl_mot, fl_mot);
    }
  }

  stt::SttOutput<S> run_stream(nn::Tape<S>& tape, int stream,
                               const std::string& span_text, nn::Var<S> fc_app,
                               nn::Var<S> fc_mot, const nn::DropoutCtx<S>& drop,
                               nn::ForwardTrace<S>* trace) const {
    const auto ids = tokenizer.encode(span_text);
    const auto seq =
        lang::pad_sequence(ids, static_cast<int>(ids.size()));
    const std::string site = "stream" + std::to_string(stream);
    nn::Var<S> q_seq = text(tape, seq, drop, trace, site + ".text");
    return reason(stream, fc_app, fc_mot, q_seq,
                  seq.keep.template cast<S>(), drop, trace, site);
  }

  nn::Var<S> fuse(const std::vector<stt::SttOutput<S>>& streams,
                  nn::ForwardTrace<S>* trace) const {
    std::vector<nn::Var<S>> l_rows;
    for (const auto& s : streams) l_rows.push_back(s.linguistic);
    nn::Var<S> mixed = graph(ad::concat_rows(l_rows));
    fusion::FusedStreams<S> fs;
    if (gates) {
      fs = (*gates)(mixed, stream_weights.empty() ? nullptr : &stream_weights);
    } else {
      const Eigen::Index dim = mixed.cols();
      for (int k = 0; k < n_streams; ++k)
        fs.rows.push_back(ad::block(mixed, k, 0, 1, dim));
      fs.flat = ad::concat_cols(fs.rows);
    }
    std::vector<nn::Var<S>> conditioned;
    for (size_t k = 0; k < streams.size(); ++k)
      conditioned.push_back(cond(streams[k].visual, fs.rows[k], trace,
                                 "cond.s" + std::to_string(k)));
    return ad::concat_cols(ad::concat_cols(conditioned), fs.flat);
  }
};

}  // namespace cvqa::model
