#include "vbiopsy/orchestration/service.hpp"

#include <httplib.h>

#include <mutex>
#include <optional>

#include "vbiopsy/imaging/nifti.hpp"
#include "vbiopsy/orchestration/pipeline.hpp"
#include "vbiopsy/orchestration/render.hpp"
#include "vbiopsy/orchestration/trial.hpp"

namespace vbiopsy::orchestration {

namespace fs = std::filesystem;
using nlohmann::json;

int http_status(ErrorCode code) {
  switch (code) {
    case ErrorCode::NotFound: return 404;
    case ErrorCode::Conflict: return 409;
    case ErrorCode::Unprocessable: return 422;
    case ErrorCode::MissingPrerequisite: return 424;
    case ErrorCode::InvalidArgument:
    case ErrorCode::NonFinite:
    case ErrorCode::NoRoi: return 400;
    default: return 500;
  }
}

struct Service::Impl {
  PipelineConfig cfg;
  Clock clock;
  TrialStore trials;
  httplib::Server server;

  std::mutex model_mutex;
  std::vector<classifier::ClassifierState> classifiers;
  std::optional<counterfactual::VaeGanState> vae;

  Impl(PipelineConfig c, Clock k) : cfg(std::move(c)), clock(k), trials(cfg.storage_root, k) {}

  const std::vector<classifier::ClassifierState>& clfs() {
    if (classifiers.empty())
      for (std::size_t s = 0; s < cfg.scales.size(); ++s) classifiers.push_back(load_clf(cfg, s));
    return classifiers;
  }

  phantom::CaseRecord record(const std::string& id) {
    require_safe_id(id, "case id");
    for (const auto& r : load_records(cfg))
      if (r.case_id == id) return r;
    fail(ErrorCode::NotFound, "unknown case '" + id + "'");
  }

  std::string split_of(const std::string& id) {
    const auto manifest = load_split_manifest(cfg);
    for (const auto& [name, ids] : manifest.splits)
      if (std::find(ids.begin(), ids.end(), id) != ids.end()) return name;
    return "";
  }

  json prediction(const std::string& id) {
    const auto split = split_of(id);
    if (fs::exists(layout(cfg).predictions(split))) {
      const auto stored = read_json(layout(cfg).predictions(split)).at("predictions");
      if (stored.contains(id)) return stored.at(id);
    }
    const auto rec = record(id);
    std::lock_guard g(model_mutex);
    const auto& models = clfs();
    std::vector<classifier::RiskPrediction> members;
    for (std::size_t s = 0; s < cfg.scales.size(); ++s)
      members.push_back(classifier::predict_all(models[s], {load_sample(cfg, s, rec)}).front());
    json out = classifier::to_json(classifier::ensemble_predict(members));
    out["member_predictions"] = json::array();
    for (const auto& m : members) out["member_predictions"].push_back(classifier::to_json(m));
    return out;
  }

  json job_view(const std::string& job_id) {
    require_safe_id(job_id, "job id");
    const auto dir = layout(cfg).job(job_id);
    require(fs::exists(dir / "trace.json"), ErrorCode::NotFound, "unknown counterfactual job '" + job_id + "'");
    auto trace = read_json(dir / "trace.json");
    const auto url = [&](const std::string& file) {
      return "/counterfactual/" + job_id + "/slice?image=" + file.substr(0, file.find('.'));
    };
    json refs{{"reconstruction", url("reconstruction.nii.gz")}, {"images", json::array()}, {"aggregate", url("heatmap_aggregate.nii.gz")}, {"sequential", json::array()}};
    for (const auto& f : trace.at("images")) refs["images"].push_back(url(f.get<std::string>()));
    for (const auto& f : trace.at("heatmaps").at("sequential")) refs["sequential"].push_back(url(f.get<std::string>()));
    return {{"job_id", job_id}, {"status", "done"}, {"trace", trace}, {"refs", refs}};
  }

  json run_job(const std::string& case_id, const std::optional<std::vector<double>>& alphas) {
    record(case_id);
    auto ccfg = cfg.counterfactual;
    if (alphas) ccfg.alphas = *alphas;
    ccfg.validate();
    const auto id = job_id_for(cfg, case_id, ccfg.schedule());
    if (fs::exists(layout(cfg).job(id) / "trace.json")) return job_view(id);
    std::lock_guard g(model_mutex);
    const auto r = run_counterfactual(cfg, case_id, alphas);
    return job_view(r.job_id);
  }
};

namespace {

void send_json(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

json parse_body(const httplib::Request& req) {
  try {
    auto j = json::parse(req.body);
    require(j.is_object(), ErrorCode::InvalidArgument, "request body must be a JSON object");
    return j;
  } catch (const json::exception& e) {
    fail(ErrorCode::InvalidArgument, std::string("malformed JSON: ") + e.what());
  }
}

std::optional<std::string> idempotency_key(const httplib::Request& req) {
  if (!req.has_header("Idempotency-Key")) return std::nullopt;
  return req.get_header_value("Idempotency-Key");
}

double query_double(const httplib::Request& req, const char* name, double fallback) {
  if (!req.has_param(name)) return fallback;
  try {
    std::size_t used = 0;
    const auto s = req.get_param_value(name);
    const double v = std::stod(s, &used);
    require(used == s.size(), ErrorCode::InvalidArgument, "");
    return v;
  } catch (...) {
    fail(ErrorCode::InvalidArgument, std::string("query parameter '") + name + "' must be a number");
  }
}

std::size_t slice_index(const httplib::Request& req, std::int64_t depth) {
  const double z = query_double(req, "z", static_cast<double>(depth / 2));
  require(z >= 0 && z < static_cast<double>(depth) && z == std::floor(z), ErrorCode::InvalidArgument,
          "z must be an integer slice index in [0, " + std::to_string(depth) + ")");
  return static_cast<std::size_t>(z);
}

template <typename F>
httplib::Server::Handler guarded(F f) {
  return [f](const httplib::Request& req, httplib::Response& res) {
    try {
      f(req, res);
    } catch (const PhaseOrderViolation& e) {
      json body{{"error", "conflict"}, {"message", e.what()}};
      if (e.deadline()) {
        body["washout_deadline"] = *e.deadline();
        body["washout_deadline_iso"] = iso8601(*e.deadline());
      }
      send_json(res, 409, body);
    } catch (const counterfactual::FidelityRejected& e) {
      send_json(res, 422, {{"error", "fidelity_rejected"}, {"message", e.what()}, {"delta_p", e.delta_p()}});
    } catch (const Error& e) {
      send_json(res, http_status(e.code()), {{"error", std::string(to_string(e.code()))}, {"message", e.what()}});
    } catch (const json::exception& e) {
      send_json(res, 400, {{"error", "invalid_argument"}, {"message", e.what()}});
    } catch (const std::exception& e) {
      send_json(res, 500, {{"error", "internal"}, {"message", e.what()}});
    }
  };
}

}  // namespace

Service::Service(PipelineConfig cfg, Clock clock) : impl_(std::make_unique<Impl>(std::move(cfg), std::move(clock))) {
  auto& s = impl_->server;
  Impl* I = impl_.get();

  s.Get("/cases", guarded([I](const httplib::Request&, httplib::Response& res) {
    const auto m = load_split_manifest(I->cfg);
    json cases = json::array();
    for (const auto& r : load_records(I->cfg)) cases.push_back({{"case_id", r.case_id}, {"split", I->split_of(r.case_id)}});
    send_json(res, 200, {{"cases", cases}});
  }));

  s.Get(R"(/cases/([^/]+)/volume)", guarded([I](const httplib::Request& req, httplib::Response& res) {
    const auto c = load_case(I->cfg, req.matches[1]);
    const auto format = req.has_param("format") ? req.get_param_value("format") : "png";
    const auto& d = c.image.dims();
    if (format == "raw") {
      std::vector<float> v(c.image.data.values().begin(), c.image.data.values().end());
      res.set_header("X-Dims", std::to_string(d.x) + "," + std::to_string(d.y) + "," + std::to_string(d.z));
      const auto& sp = c.image.geometry.spacing;
      res.set_header("X-Spacing", std::to_string(sp[0]) + "," + std::to_string(sp[1]) + "," + std::to_string(sp[2]));
      res.set_content(std::string(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(float)),
                      "application/octet-stream");
      return;
    }
    require(format == "png", ErrorCode::InvalidArgument, "format must be png or raw");
    auto w = auto_window(c.image.data);
    w.level = query_double(req, "level", w.level);
    w.width = query_double(req, "width", w.width);
    const auto z = slice_index(req, d.z);
    const bool overlay = req.has_param("overlay") && req.get_param_value("overlay") == "gland";
    const auto png = render_slice_png(c.image.data, z, w, overlay ? &c.gland.labels : nullptr);
    res.set_content(std::string(png.begin(), png.end()), "image/png");
  }));

  s.Get(R"(/cases/([^/]+)/clinical)", guarded([I](const httplib::Request& req, httplib::Response& res) {
    const auto r = I->record(req.matches[1]);
    send_json(res, 200,
              {{"case_id", r.case_id},
               {"age", r.age},
               {"psa", r.psa},
               {"psa_density", r.psa_density ? json(*r.psa_density) : json(nullptr)}});
  }));

  s.Get(R"(/cases/([^/]+)/prediction)", guarded([I](const httplib::Request& req, httplib::Response& res) {
    const std::string id = req.matches[1];
    if (req.has_param("session")) {
      const auto sid = req.get_param_value("session");
      const auto m = I->trials.load(TrialStore::trial_of(sid));
      if (m.session(sid).phase == metrics::TrialPhase::Unaided) {
        send_json(res, 403, {{"error", "forbidden"}, {"message", "AI output is hidden during the unaided phase"}});
        return;
      }
    }
    send_json(res, 200, I->prediction(id));
  }));

  s.Post("/counterfactual", guarded([I](const httplib::Request& req, httplib::Response& res) {
    const auto body = parse_body(req);
    std::optional<std::vector<double>> alphas;
    if (body.contains("alpha_schedule") && !body.at("alpha_schedule").is_null())
      alphas = body.at("alpha_schedule").get<std::vector<double>>();
    send_json(res, 200, I->run_job(body.at("case_id").get<std::string>(), alphas));
  }));

  s.Get(R"(/counterfactual/([^/]+))", guarded([I](const httplib::Request& req, httplib::Response& res) {
    send_json(res, 200, I->job_view(req.matches[1]));
  }));

  s.Get(R"(/counterfactual/([^/]+)/slice)", guarded([I](const httplib::Request& req, httplib::Response& res) {
    const std::string job = req.matches[1];
    require_safe_id(job, "job id");
    const auto image = req.has_param("image") ? req.get_param_value("image") : "reconstruction";
    require_safe_id(image, "image name");
    const auto path = layout(I->cfg).job(job) / (image + ".nii.gz");
    require(fs::exists(path), ErrorCode::NotFound, "no image '" + image + "' in job " + job);
    const auto vol = imaging::read_volume(path);
    const auto z = slice_index(req, vol.dims().z);
    std::vector<std::uint8_t> png;
    if (image.rfind("heatmap", 0) == 0) {
      std::optional<double> scale;
      if (req.has_param("scale")) scale = query_double(req, "scale", 1.0);
      png = render_heatmap_png(vol.data, z, scale);
    } else {
      Window w{query_double(req, "level", 0.5), query_double(req, "width", 1.0)};
      png = render_slice_png(vol.data, z, w);
    }
    res.set_content(std::string(png.begin(), png.end()), "image/png");
  }));

  s.Post(R"(/trial/([^/]+)/session)", guarded([I](const httplib::Request& req, httplib::Response& res) {
    const auto body = parse_body(req);
    send_json(res, 200,
              I->trials.open_session(req.matches[1], body.at("reader").get<std::string>(),
                                     body.at("phase").get<std::string>(), idempotency_key(req)));
  }));

  s.Get(R"(/session/([^/]+))", guarded([I](const httplib::Request& req, httplib::Response& res) {
    const std::string sid = req.matches[1];
    const auto m = I->trials.load(TrialStore::trial_of(sid));
    auto j = metrics::to_json(m.session(sid));
    j["cases"] = m.definition().case_order(m.session(sid).reader_id);
    send_json(res, 200, j);
  }));

  s.Post(R"(/session/([^/]+)/decision)", guarded([I](const httplib::Request& req, httplib::Response& res) {
    const auto body = parse_body(req);
    send_json(res, 200,
              I->trials.decide(req.matches[1], body.at("case_id").get<std::string>(), body.at("decision").get<int>(),
                               body.at("elapsed_seconds").get<double>(), idempotency_key(req)));
  }));

  s.Post(R"(/session/([^/]+)/finalize)", guarded([I](const httplib::Request& req, httplib::Response& res) {
    send_json(res, 200, I->trials.finalize(req.matches[1], idempotency_key(req)));
  }));

  s.Get(R"(/trial/([^/]+)/report)", guarded([I](const httplib::Request& req, httplib::Response& res) {
    send_json(res, 200, I->trials.report(req.matches[1]));
  }));
}

Service::~Service() { stop(); }

int Service::bind_any_port(const std::string& host) { return impl_->server.bind_to_any_port(host); }
bool Service::bind(const std::string& host, int port) { return impl_->server.bind_to_port(host, port); }
bool Service::listen_after_bind() { return impl_->server.listen_after_bind(); }
void Service::stop() {
  if (impl_ && impl_->server.is_running()) impl_->server.stop();
}
void Service::wait_until_ready() const { impl_->server.wait_until_ready(); }
httplib::Server& Service::server() { return impl_->server; }

}  // namespace vbiopsy::orchestration
