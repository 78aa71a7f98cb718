#pragma once

#include <httplib.h>
#include <json.hpp>

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "memeguard/backend.hpp"
#include "memeguard/config.hpp"
#include "memeguard/core.hpp"
#include "memeguard/evaluation.hpp"
#include "memeguard/intervention.hpp"
#include "memeguard/knowledge.hpp"
#include "memeguard/selection.hpp"

namespace memeguard::service {

// ---------------------------------------------------------------------------
// Queue state machine

enum class ItemState { pending, knowledge_ready, filtered, generated, approved, rejected, edited };
enum class Action { advance, approve, reject, edit };

inline constexpr std::array<ItemState, 7> kStates = {ItemState::pending,   ItemState::knowledge_ready, ItemState::filtered,
                                                     ItemState::generated, ItemState::approved,        ItemState::rejected,
                                                     ItemState::edited};
inline constexpr std::array<Action, 4> kActions = {Action::advance, Action::approve, Action::reject, Action::edit};

inline std::string_view state_name(ItemState s) {
  static constexpr std::array<std::string_view, 7> names = {"pending",  "knowledge_ready", "filtered", "generated",
                                                            "approved", "rejected",        "edited"};
  return names[static_cast<std::size_t>(s)];
}

inline std::optional<ItemState> parse_state(std::string_view s) {
  for (ItemState st : kStates)
    if (state_name(st) == s) return st;
  return std::nullopt;
}

inline std::string_view action_name(Action a) {
  static constexpr std::array<std::string_view, 4> names = {"advance", "approve", "reject", "edit"};
  return names[static_cast<std::size_t>(a)];
}

inline std::optional<Action> parse_action(std::string_view s) {
  for (Action a : kActions)
    if (action_name(a) == s) return a;
  return std::nullopt;
}

inline bool is_terminal(ItemState s) { return s == ItemState::approved || s == ItemState::rejected; }

/// The transition table; nullopt marks an illegal move.
inline std::optional<ItemState> next_state(ItemState s, Action a) {
  if (a == Action::advance) {
    switch (s) {
      case ItemState::pending: return ItemState::knowledge_ready;
      case ItemState::knowledge_ready: return ItemState::filtered;
      case ItemState::filtered: return ItemState::generated;
      default: return std::nullopt;
    }
  }
  if (s != ItemState::generated && s != ItemState::edited) return std::nullopt;
  switch (a) {
    case Action::approve: return ItemState::approved;
    case Action::reject: return ItemState::rejected;
    case Action::edit: return ItemState::edited;
    default: return std::nullopt;
  }
}

struct QueueItem {
  std::string meme_id;
  ItemState state = ItemState::pending;
  std::string intervention;           // current text (edited text after an edit)
  std::string original_intervention;  // generated text, kept across edits
  json history = json::array();       // decisions: {action, author, at, text?}
  std::string decision_author;
  std::string created_at;
  std::string updated_at;
};

inline json to_json(const QueueItem& q) {
  return {{"meme_id", q.meme_id},
          {"state", state_name(q.state)},
          {"intervention", q.intervention},
          {"original_intervention", q.original_intervention},
          {"history", q.history},
          {"decision_author", q.decision_author},
          {"created_at", q.created_at},
          {"updated_at", q.updated_at}};
}

// ---------------------------------------------------------------------------
// State and events

/// Everything the service knows; rebuilt exactly by replaying the journal.
struct State {
  std::uint64_t seq = 0;
  std::map<std::string, MemeRecord> memes;
  std::map<std::string, std::string> digests;  // content digest -> meme id
  std::map<std::string, QueueItem> items;
  std::map<std::string, KnowledgeSet> knowledge;
  std::map<std::string, KnowledgeSet> filtered;
  std::map<std::string, json> traces;  // meme id -> array of trace rows
  std::map<std::string, json> generations;  // meme id -> {prompt, llm_model, text}
  std::vector<HumanRating> ratings;

  json to_json() const {
    json j;
    j["seq"] = seq;
    json memes_j = json::object();
    for (const auto& [id, m] : memes) memes_j[id] = memeguard::to_json(m);
    j["memes"] = memes_j;
    j["digests"] = digests;
    json items_j = json::object();
    for (const auto& [id, q] : items) items_j[id] = service::to_json(q);
    j["items"] = items_j;
    json k = json::object(), f = json::object();
    for (const auto& [id, ks] : knowledge) k[id] = facets_to_json(ks);
    for (const auto& [id, ks] : filtered) f[id] = facets_to_json(ks);
    j["knowledge"] = k;
    j["filtered"] = f;
    j["traces"] = traces;
    j["generations"] = generations;
    json r = json::array();
    for (const auto& x : ratings) r.push_back(memeguard::to_json(x));
    j["ratings"] = r;
    return j;
  }

  static State from_json(const json& j) {
    State s;
    s.seq = j.at("seq").get<std::uint64_t>();
    for (const auto& [id, m] : j.at("memes").items()) s.memes[id] = meme_from_json(m);
    s.digests = j.at("digests").get<std::map<std::string, std::string>>();
    for (const auto& [id, q] : j.at("items").items()) {
      QueueItem item;
      item.meme_id = q.at("meme_id");
      item.state = *parse_state(q.at("state").get<std::string>());
      item.intervention = q.at("intervention");
      item.original_intervention = q.at("original_intervention");
      item.history = q.at("history");
      item.decision_author = q.at("decision_author");
      item.created_at = q.at("created_at");
      item.updated_at = q.at("updated_at");
      s.items[id] = std::move(item);
    }
    for (const auto& [id, f] : j.at("knowledge").items()) s.knowledge[id] = facets_from_json(f);
    for (const auto& [id, f] : j.at("filtered").items()) s.filtered[id] = facets_from_json(f);
    for (const auto& [id, t] : j.at("traces").items()) s.traces[id] = t;
    for (const auto& [id, g] : j.at("generations").items()) s.generations[id] = g;
    for (const auto& r : j.at("ratings")) s.ratings.push_back(rating_from_json(r));
    return s;
  }
};

/// Applies one journal event. Live operations and replay share this path.
inline void apply_event(State& s, const json& ev) {
  const std::string type = ev.at("type");
  const std::string at = ev.value("at", "");
  s.seq = ev.at("seq").get<std::uint64_t>();
  if (type == "ingest") {
    MemeRecord m = meme_from_json(ev.at("meme"));
    s.digests[ev.at("digest")] = m.id;
    QueueItem q;
    q.meme_id = m.id;
    q.created_at = q.updated_at = at;
    s.items[m.id] = std::move(q);
    s.memes[m.id] = std::move(m);
    return;
  }
  if (type == "rating") {
    s.ratings.push_back(rating_from_json(ev.at("rating")));
    return;
  }
  const std::string id = ev.at("id");
  QueueItem& q = s.items.at(id);
  q.updated_at = at;
  if (type == "knowledge") {
    s.knowledge[id] = facets_from_json(ev.at("facets"));
    q.state = ItemState::knowledge_ready;
  } else if (type == "filtered") {
    s.filtered[id] = facets_from_json(ev.at("facets"));
    s.traces[id] = ev.at("trace");
    q.state = ItemState::filtered;
  } else if (type == "generated") {
    s.generations[id] = {{"prompt", ev.at("prompt")}, {"llm_model", ev.at("llm_model")}, {"text", ev.at("text")}};
    q.intervention = q.original_intervention = ev.at("text");
    q.state = ItemState::generated;
  } else if (type == "decision") {
    const Action a = *parse_action(ev.at("action").get<std::string>());
    json h = {{"action", action_name(a)}, {"author", ev.at("author")}, {"at", at}};
    if (a == Action::edit) {
      q.intervention = ev.at("text");
      h["text"] = ev.at("text");
    }
    q.history.push_back(std::move(h));
    q.decision_author = ev.at("author");
    q.state = *next_state(q.state, a);
  } else {
    throw std::runtime_error("unknown journal event: " + type);
  }
}

// ---------------------------------------------------------------------------
// Service

struct Response {
  int status = 200;
  json body = json::object();
};

inline Response error(int status, const std::string& message, const std::string& stage = {}) {
  json b = {{"error", message}};
  if (!stage.empty()) b["stage"] = stage;
  return {status, b};
}

struct ServiceOptions {
  std::filesystem::path data_dir = "data";
  PipelineBindings bindings;
  GenerationConfig generation;
  MksConfig mks;
  std::size_t max_upload_bytes = 10 * 1024 * 1024;
  std::size_t snapshot_every = 100;
  std::function<std::string()> clock = [] {
    const auto now = std::chrono::system_clock::now();
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return std::string(buf);
  };

  static ServiceOptions from_config(const Config& c) {
    ServiceOptions o;
    o.data_dir = c.server.data_dir;
    o.bindings = c.effective_bindings();
    o.generation = c.generation;
    o.mks = c.mks();
    o.max_upload_bytes = c.server.max_upload_bytes;
    return o;
  }
};

/// Moderation queue over an append-only journal (data_dir/journal.jsonl) with periodic snapshots
/// (data_dir/snapshot.json). Image bytes live in data_dir/blobs/<sha256>.
class ModerationService {
 public:
  ModerationService(ServiceOptions opts, Gateway& gateway) : opts_(std::move(opts)), gateway_(gateway) {
    std::filesystem::create_directories(opts_.data_dir / "blobs");
    replay();
    journal_.open(journal_path(), std::ios::app | std::ios::binary);
    if (!journal_) throw std::runtime_error("cannot open journal " + journal_path().string());
  }

  struct Upload {
    std::string image;
    std::string ocr_text;
    std::optional<std::string> id;
    std::optional<std::string> gold_content;
    std::optional<std::string> gold_filler;
    std::optional<std::string> language_tag;
    bool image_only = false;
  };

  Response ingest(const Upload& up) {
    if (up.image.empty()) return error(400, "missing image");
    if (up.image.size() > opts_.max_upload_bytes) return error(413, "image exceeds upload cap");
    std::string material = up.image;
    material.push_back('\0');
    material += up.ocr_text;
    const std::string digest = sha256_hex(material);
    const std::string image_digest = sha256_hex(up.image);
    std::lock_guard lock(mu_);
    if (const auto it = state_.digests.find(digest); it != state_.digests.end())
      return {200, {{"id", it->second}, {"duplicate", true}}};
    MemeRecord m;
    m.id = up.id.value_or("m-" + digest.substr(0, 16));
    if (state_.memes.count(m.id)) return error(409, "id already exists: " + m.id);
    m.image_path = "blobs/" + image_digest;
    m.ocr_text = up.ocr_text;
    m.image_only = up.image_only;
    m.language_tag = up.language_tag;
    if (up.gold_content || up.gold_filler)
      m.gold = GoldIntervention::from_parts(up.gold_content.value_or(""), up.gold_filler.value_or(""));
    try {
      validate(m);
    } catch (const DatasetError& e) {
      return error(400, e.what());
    }
    const auto blob = opts_.data_dir / m.image_path;
    if (!std::filesystem::exists(blob)) write_file_atomic(blob, up.image);
    commit({{"type", "ingest"}, {"meme", memeguard::to_json(m)}, {"digest", digest}});
    return {201, {{"id", m.id}}};
  }

  Response get_meme(const std::string& id) const {
    std::lock_guard lock(mu_);
    const auto it = state_.memes.find(id);
    if (it == state_.memes.end()) return error(404, "unknown meme " + id);
    json j = memeguard::to_json(it->second);
    if (const auto k = state_.knowledge.find(id); k != state_.knowledge.end()) j["knowledge"] = facets_to_json(k->second);
    if (const auto f = state_.filtered.find(id); f != state_.filtered.end()) j["filtered"] = facets_to_json(f->second);
    if (const auto g = state_.generations.find(id); g != state_.generations.end()) j["generation"] = g->second;
    j["item"] = to_json(state_.items.at(id));
    return {200, j};
  }

  Response list_queue(std::optional<std::string> state_filter) const {
    std::optional<ItemState> wanted;
    if (state_filter && !state_filter->empty()) {
      wanted = parse_state(*state_filter);
      if (!wanted) return error(400, "unknown state " + *state_filter);
    }
    std::lock_guard lock(mu_);
    json out = json::array();
    for (const auto& [id, q] : state_.items)
      if (!wanted || q.state == *wanted) out.push_back(to_json(q));
    return {200, out};
  }

  Response get_item(const std::string& id) const {
    std::lock_guard lock(mu_);
    const auto it = state_.items.find(id);
    if (it == state_.items.end()) return error(404, "unknown item " + id);
    return {200, to_json(it->second)};
  }

  Response trace(const std::string& id) const {
    std::lock_guard lock(mu_);
    if (!state_.items.count(id)) return error(404, "unknown item " + id);
    const auto it = state_.traces.find(id);
    return {200, it == state_.traces.end() ? json::array() : it->second};
  }

  /// Runs exactly the next pipeline stage for the item.
  Response advance(const std::string& id) {
    auto item_lock = lock_item(id);
    MemeRecord meme;
    ItemState current;
    std::optional<KnowledgeSet> knowledge, filtered;
    {
      std::lock_guard lock(mu_);
      const auto it = state_.items.find(id);
      if (it == state_.items.end()) return error(404, "unknown item " + id);
      current = it->second.state;
      meme = state_.memes.at(id);
      if (const auto k = state_.knowledge.find(id); k != state_.knowledge.end()) knowledge = k->second;
      if (const auto f = state_.filtered.find(id); f != state_.filtered.end()) filtered = f->second;
    }
    if (!next_state(current, Action::advance))
      return error(409, "cannot advance item in state " + std::string(state_name(current)));
    const auto image = opts_.data_dir / meme.image_path;
    json ev;
    std::string stage;
    try {
      switch (current) {
        case ItemState::pending: {
          stage = "knowledge";
          const KnowledgeResult r = generate_knowledge(meme, image, gateway_, opts_.bindings.vlmeme, opts_.generation);
          ev = {{"type", "knowledge"}, {"id", id}, {"facets", facets_to_json(r.knowledge)}};
          break;
        }
        case ItemState::knowledge_ready: {
          stage = "filter";
          const EmbeddingVector img = gateway_.embed_image(opts_.mks.embed_binding, image);
          const FilterResult r = filter_knowledge(*knowledge, img, opts_.mks, [&](const std::string& s) {
            return gateway_.embed_text(opts_.mks.embed_binding, s);
          });
          json rows = json::array();
          for (const auto& row : r.trace) rows.push_back(trace_row(id, row, opts_.mks.threshold));
          ev = {{"type", "filtered"}, {"id", id}, {"facets", facets_to_json(r.knowledge)}, {"trace", rows}};
          break;
        }
        default: {
          stage = "generate";
          const BackendBinding& llm = opts_.bindings.llms.front();
          const Intervention iv =
              generate_intervention(meme, Setting::memeguard, &*filtered, gateway_, llm, opts_.generation);
          ev = {{"type", "generated"}, {"id", id}, {"prompt", iv.prompt_sent}, {"llm_model", iv.llm_model},
                {"text", iv.text}};
          break;
        }
      }
    } catch (const std::exception& e) {
      return error(502, e.what(), stage);
    }
    std::lock_guard lock(mu_);
    commit(std::move(ev));
    return {200, to_json(state_.items.at(id))};
  }

  /// body: {action: approve|reject|edit, text?: string, author: string}
  Response decide(const std::string& id, const json& body) {
    if (!body.is_object()) return error(400, "body must be a JSON object");
    const auto action = parse_action(body.value("action", ""));
    if (!action || *action == Action::advance) return error(400, "action must be approve, reject or edit");
    const std::string author = body.value("author", "");
    if (author.empty()) return error(400, "author is required");
    const auto text = body.find("text");
    if (*action == Action::edit && (text == body.end() || !text->is_string() || text->get<std::string>().empty()))
      return error(400, "edit requires text");
    auto item_lock = lock_item(id);
    std::lock_guard lock(mu_);
    const auto it = state_.items.find(id);
    if (it == state_.items.end()) return error(404, "unknown item " + id);
    if (!next_state(it->second.state, *action))
      return error(409, "cannot " + std::string(action_name(*action)) + " item in state " +
                            std::string(state_name(it->second.state)));
    json ev = {{"type", "decision"}, {"id", id}, {"action", action_name(*action)}, {"author", author}};
    if (*action == Action::edit) ev["text"] = *text;
    commit(std::move(ev));
    return {200, to_json(state_.items.at(id))};
  }

  Response add_rating(const json& body) {
    HumanRating r;
    try {
      if (!body.is_object()) throw DatasetError("body must be a JSON object");
      r = rating_from_json(body);
    } catch (const std::exception& e) {
      return error(400, e.what());
    }
    std::lock_guard lock(mu_);
    for (const auto& x : state_.ratings)
      if (x.meme_id == r.meme_id && x.evaluator_id == r.evaluator_id && x.system == r.system)
        return error(409, "duplicate rating for (" + r.meme_id + ", " + r.evaluator_id + ", " + r.system + ")");
    commit({{"type", "rating"}, {"rating", memeguard::to_json(r)}});
    return {201, memeguard::to_json(r)};
  }

  Response agreement_report() const {
    std::vector<HumanRating> ratings;
    {
      std::lock_guard lock(mu_);
      ratings = state_.ratings;
    }
    try {
      return {200, to_json(agreement_by_evaluator(ratings))};
    } catch (const NoOverlapError&) {
      return error(404, "no overlap");
    } catch (const std::exception& e) {
      return error(400, e.what());
    }
  }

  /// Scores the generated (pre-edit) interventions of every item with a gold reference.
  Response metrics_report() {
    std::vector<Intervention> ivs;
    std::map<std::string, std::string> golds;
    {
      std::lock_guard lock(mu_);
      for (const auto& [id, g] : state_.generations) {
        const MemeRecord& m = state_.memes.at(id);
        if (!m.gold) continue;
        Intervention iv;
        iv.meme_id = id;
        iv.setting = Setting::memeguard;
        iv.llm_model = g.at("llm_model");
        iv.prompt_sent = g.at("prompt");
        iv.text = g.at("text");
        ivs.push_back(std::move(iv));
        golds[id] = m.gold->full_text;
      }
    }
    if (ivs.empty()) return error(404, "no generated interventions with gold references");
    try {
      const auto report = evaluate_run(ivs, golds, token_embedder(gateway_, opts_.mks.embed_binding),
                                       {{"embed", opts_.mks.embed_binding.id()}});
      return {200, to_json(report)};
    } catch (const std::exception& e) {
      return error(502, e.what(), "evaluate");
    }
  }

  json state_json() const {
    std::lock_guard lock(mu_);
    return state_.to_json();
  }

  const ServiceOptions& options() const { return opts_; }

 private:
  std::filesystem::path journal_path() const { return opts_.data_dir / "journal.jsonl"; }
  std::filesystem::path snapshot_path() const { return opts_.data_dir / "snapshot.json"; }

  void replay() {
    if (std::filesystem::exists(snapshot_path())) state_ = State::from_json(json::parse(read_file_bytes(snapshot_path())));
    std::ifstream in(journal_path());
    std::string line;
    while (std::getline(in, line)) {
      if (trim(line).empty()) continue;
      const json ev = json::parse(line);
      if (ev.at("seq").get<std::uint64_t>() <= state_.seq) continue;
      apply_event(state_, ev);
    }
  }

  // Caller holds mu_.
  void commit(json ev) {
    ev["seq"] = state_.seq + 1;
    ev["at"] = opts_.clock();
    journal_ << ev.dump() << '\n';
    journal_.flush();
    if (!journal_) throw std::runtime_error("journal write failed");
    apply_event(state_, ev);
    if (opts_.snapshot_every && state_.seq % opts_.snapshot_every == 0)
      write_file_atomic(snapshot_path(), state_.to_json().dump());
  }

  std::unique_lock<std::mutex> lock_item(const std::string& id) {
    std::mutex* m;
    {
      std::lock_guard lock(mu_);
      auto& slot = item_locks_[id];
      if (!slot) slot = std::make_unique<std::mutex>();
      m = slot.get();
    }
    return std::unique_lock<std::mutex>(*m);
  }

  ServiceOptions opts_;
  Gateway& gateway_;
  mutable std::mutex mu_;
  State state_;
  std::ofstream journal_;
  std::map<std::string, std::unique_ptr<std::mutex>> item_locks_;
};

// ---------------------------------------------------------------------------
// HTTP binding

/// JSON-over-HTTP front end. When `token` is non-empty every request needs
/// "Authorization: Bearer <token>".
class HttpServer {
 public:
  HttpServer(ModerationService& svc, std::string token, std::filesystem::path ui_dir = {})
      : svc_(svc), token_(std::move(token)) {
    server_.set_payload_max_length(svc_.options().max_upload_bytes + (1 << 20));
    if (!ui_dir.empty() && std::filesystem::is_directory(ui_dir)) server_.set_mount_point("/ui", ui_dir.string());
    routes();
  }

  bool listen(const std::string& host, int port) { return server_.listen(host, port); }
  int bind_to_any_port(const std::string& host) { return server_.bind_to_any_port(host); }
  bool listen_after_bind() { return server_.listen_after_bind(); }
  void stop() { server_.stop(); }
  void wait_until_ready() { server_.wait_until_ready(); }

 private:
  static void send(httplib::Response& res, const Response& r) {
    res.status = r.status;
    res.set_content(r.body.dump(), "application/json");
  }

  template <typename Handler>
  auto guarded(Handler h) {
    return [this, h](const httplib::Request& req, httplib::Response& res) {
      if (!token_.empty() && req.get_header_value("Authorization") != "Bearer " + token_) {
        send(res, error(401, "unauthorized"));
        return;
      }
      try {
        send(res, h(req));
      } catch (const std::exception& e) {
        send(res, error(500, e.what()));
      }
    };
  }

  static std::optional<json> parse_body(const httplib::Request& req) {
    try {
      return json::parse(req.body);
    } catch (const json::parse_error&) {
      return std::nullopt;
    }
  }

  void routes() {
    server_.Post("/memes", guarded([this](const httplib::Request& req) {
      if (!req.is_multipart_form_data()) return error(400, "expected multipart/form-data");
      if (!req.has_file("image")) return error(400, "missing image part");
      ModerationService::Upload up;
      up.image = req.get_file_value("image").content;
      if (!req.has_file("ocr_text")) return error(400, "missing ocr_text part");
      up.ocr_text = req.get_file_value("ocr_text").content;
      auto opt = [&req](const char* key) -> std::optional<std::string> {
        if (!req.has_file(key)) return std::nullopt;
        return req.get_file_value(key).content;
      };
      up.id = opt("id");
      up.gold_content = opt("gold_content");
      up.gold_filler = opt("gold_filler");
      up.language_tag = opt("language_tag");
      up.image_only = opt("image_only").value_or("false") == "true";
      return svc_.ingest(up);
    }));
    server_.Get(R"(/memes/([^/]+))", guarded([this](const httplib::Request& req) { return svc_.get_meme(req.matches[1]); }));
    server_.Get("/queue", guarded([this](const httplib::Request& req) {
      return svc_.list_queue(req.has_param("state") ? std::optional<std::string>(req.get_param_value("state")) : std::nullopt);
    }));
    server_.Get(R"(/queue/([^/]+))", guarded([this](const httplib::Request& req) { return svc_.get_item(req.matches[1]); }));
    server_.Get(R"(/queue/([^/]+)/trace)", guarded([this](const httplib::Request& req) { return svc_.trace(req.matches[1]); }));
    server_.Post(R"(/queue/([^/]+)/advance)", guarded([this](const httplib::Request& req) { return svc_.advance(req.matches[1]); }));
    server_.Post(R"(/queue/([^/]+)/decision)", guarded([this](const httplib::Request& req) {
      const auto body = parse_body(req);
      if (!body) return error(400, "malformed JSON body");
      return svc_.decide(req.matches[1], *body);
    }));
    server_.Post("/ratings", guarded([this](const httplib::Request& req) {
      const auto body = parse_body(req);
      if (!body) return error(400, "malformed JSON body");
      return svc_.add_rating(*body);
    }));
    server_.Get("/reports/agreement", guarded([this](const httplib::Request&) { return svc_.agreement_report(); }));
    server_.Get("/reports/metrics", guarded([this](const httplib::Request&) { return svc_.metrics_report(); }));
  }

  ModerationService& svc_;
  std::string token_;
  httplib::Server server_;
};

}  // namespace memeguard::service
