#pragma once

#include <json.hpp>
#include <opencv2/imgproc.hpp>

#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <thread>

#include "r3p/common.hpp"
#include "r3p/data.hpp"
#include "r3p/feedback.hpp"
#include "r3p/image_io.hpp"
#include "r3p/protopnet.hpp"

// After Eigen: httplib pulls in <resolv.h>, whose _res macro breaks Eigen.
#include <httplib.h>

namespace r3p {

struct HttpReply {
  int status = 200;
  std::string body;
  std::string content_type = "application/json";
};

inline HttpReply json_reply(int status, const nlohmann::json& body) {
  return {status, body.dump(), "application/json"};
}

inline HttpReply error_reply(int status, const std::string& message) {
  return json_reply(status, {{"error", message}});
}

// Request handling for the rating workflow, independent of the transport.
class RatingService {
 public:
  RatingService(const PrototypeNet& model, const DatasetManifest& data, RatingStore& store,
                std::optional<TaskPool> pool, int display_scale = 4)
      : model_(model), data_(data), store_(store), pool_(std::move(pool)),
        scale_(display_scale) {}

  bool ready() const { return pool_.has_value(); }

  const TaskPool& pool() const {
    require<ServiceError>(pool_.has_value(), "task pool is not initialized");
    return *pool_;
  }

  std::optional<RatingTask> next_task(const std::string& rater_id) const {
    require<ValidationError>(!rater_id.empty(), "rater_id is required");
    return pool().next_task(rater_id, store_.records());
  }

  // Body: {"rater_id", "rating", and "task_id" or "image_id" + "prototype_id"}.
  RatingRecord submit(const nlohmann::json& body) const {
    require<ValidationError>(body.is_object(), "request body must be a JSON object");
    require<ValidationError>(body.contains("rater_id") && body["rater_id"].is_string(),
                             "rater_id is required");
    require<ValidationError>(body.contains("rating") && body["rating"].is_number_integer(),
                             "rating must be an integer 1..5");
    const TaskPool& tasks = pool();
    const RatingTask* task = nullptr;
    if (body.contains("task_id")) {
      require<ValidationError>(body["task_id"].is_number_integer(), "task_id must be an integer");
      const int id = body["task_id"].get<int>();
      require<ValidationError>(id >= 0 && id < static_cast<int>(tasks.tasks().size()),
                               "unknown task ", id);
      task = &tasks.tasks()[id];
    } else {
      require<ValidationError>(body.contains("image_id") && body.contains("prototype_id"),
                               "task_id or image_id and prototype_id are required");
      task = tasks.find({body["image_id"].get<std::string>(), body["prototype_id"].get<int>()});
      require<ValidationError>(task != nullptr, "no such task");
    }
    RatingRecord record;
    record.image_id = task->image_id;
    record.prototype_id = task->prototype_id;
    record.model_id = tasks.model_id();
    record.rater_id = body["rater_id"].get<std::string>();
    record.rating = body["rating"].get<int>();
    return store_.submit(record);
  }

  nlohmann::json progress(const std::string& rater_id) const {
    const auto records = store_.records();
    std::set<ItemKey> rated;
    int mine = 0;
    for (const auto& r : records) {
      if (r.model_id != pool().model_id()) continue;
      rated.insert({r.image_id, r.prototype_id});
      mine += r.rater_id == rater_id;
    }
    return {{"total_tasks", pool().tasks().size()},
            {"rated_tasks", rated.size()},
            {"total_ratings", records.size()},
            {"rater_id", rater_id},
            {"rater_ratings", mine}};
  }

  std::vector<std::uint8_t> image_png(const std::string& image_id) const {
    const LabeledImage& image = lookup(image_id);
    cv::Mat bgr = to_bgr(image.pixels);
    cv::Mat big;
    cv::resize(bgr, big, cv::Size(), scale_, scale_, cv::INTER_NEAREST);
    return encode_png(big);
  }

  std::vector<std::uint8_t> heatmap_png(const std::string& image_id, int prototype_id) const {
    const LabeledImage& image = lookup(image_id);
    const Prototype* proto = nullptr;
    for (const auto& p : model_.prototypes)
      if (p.prototype_id == prototype_id) proto = &p;
    require<ValidationError>(proto != nullptr, "unknown prototype ", prototype_id);
    const ActivationMap map = activation_map(model_, *proto, image);
    return encode_png(heatmap_overlay(image.pixels, map.display, 0.5, scale_));
  }

 private:
  const LabeledImage& lookup(const std::string& image_id) const {
    for (const auto& image : data_.images)
      if (image.image_id == image_id) return image;
    throw ValidationError("unknown image " + image_id);
  }

  const PrototypeNet& model_;
  const DatasetManifest& data_;
  RatingStore& store_;
  std::optional<TaskPool> pool_;
  int scale_;
};

inline HttpReply handle_errors(const std::function<HttpReply()>& body) {
  try {
    return body();
  } catch (const ValidationError& e) {
    return error_reply(400, e.what());
  } catch (const ConflictError& e) {
    return error_reply(409, e.what());
  } catch (const ServiceError& e) {
    return error_reply(503, e.what());
  } catch (const nlohmann::json::exception& e) {
    return error_reply(400, std::string("malformed request: ") + e.what());
  } catch (const std::exception& e) {
    return error_reply(500, e.what());
  }
}

// HTTP front end: JSON API under /api and the rating UI bundle as static files.
class RatingServer {
 public:
  RatingServer(RatingService& service, const std::optional<std::filesystem::path>& ui_dir)
      : service_(service) {
    auto send = [](httplib::Response& res, const HttpReply& reply) {
      res.status = reply.status;
      if (reply.status != 204) res.set_content(reply.body, reply.content_type);
    };
    auto png = [](std::vector<std::uint8_t> bytes) {
      return HttpReply{200, std::string(bytes.begin(), bytes.end()), "image/png"};
    };

    server_.Get("/api/tasks/next", [this, send](const httplib::Request& req, httplib::Response& res) {
      send(res, handle_errors([&] {
             const auto task = service_.next_task(req.get_param_value("rater_id"));
             if (!task) return HttpReply{204, "", "application/json"};
             return json_reply(200, *task);
           }));
    });
    server_.Post("/api/ratings", [this, send](const httplib::Request& req, httplib::Response& res) {
      send(res, handle_errors([&] {
             const auto record = service_.submit(nlohmann::json::parse(req.body));
             return json_reply(201, record);
           }));
    });
    server_.Get("/api/progress", [this, send](const httplib::Request& req, httplib::Response& res) {
      send(res, handle_errors([&] {
             return json_reply(200, service_.progress(req.get_param_value("rater_id")));
           }));
    });
    server_.Get("/api/rubric", [send](const httplib::Request&, httplib::Response& res) {
      send(res, json_reply(200, rubric_json()));
    });
    server_.Get(R"(/api/images/(.+))",
                [this, send, png](const httplib::Request& req, httplib::Response& res) {
                  send(res, handle_errors([&] { return png(service_.image_png(req.matches[1])); }));
                });
    server_.Get(R"(/api/heatmaps/(.+)/(\d+))",
                [this, send, png](const httplib::Request& req, httplib::Response& res) {
                  send(res, handle_errors([&] {
                         return png(service_.heatmap_png(req.matches[1],
                                                         std::stoi(req.matches[2].str())));
                       }));
                });
    if (ui_dir) {
      require<ConfigError>(std::filesystem::is_directory(*ui_dir), "UI directory not found: ",
                           ui_dir->string());
      server_.set_mount_point("/", ui_dir->string());
    }
  }

  ~RatingServer() { stop(); }

  // Binds and serves on a background thread; port 0 picks a free port.
  int start(const std::string& host, int port) {
    const int bound = port == 0 ? server_.bind_to_any_port(host) : (server_.bind_to_port(host, port) ? port : -1);
    require<ServiceError>(bound > 0, "cannot bind ", host, ":", port);
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
    return bound;
  }

  // Blocks until the server stops.
  void serve(const std::string& host, int port) {
    require<ServiceError>(server_.listen(host, port), "cannot listen on ", host, ":", port);
  }

  void stop() {
    server_.stop();
    if (thread_.joinable()) thread_.join();
  }

 private:
  RatingService& service_;
  httplib::Server server_;
  std::thread thread_;
};

}  // namespace r3p
