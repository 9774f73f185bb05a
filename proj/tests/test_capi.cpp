#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>

#include "json.hpp"
#include "mvtk/mvtk.h"
#include "testutil.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

// Micro chain settings: small enough that the whole flow runs in well under
// a second, large enough to exercise every stage.
json chain_config(const std::string& root) {
    json j;
    j["subjects"] = 2;
    j["views_per_subject"] = 4;
    j["width"] = 32;
    j["height"] = 48;
    j["focal"] = 60.0;
    j["garment_size"] = 24;
    j["view_count"] = 4;
    j["batch_views"] = 2;
    j["train_views"] = 2;
    j["blocks"] = 1;
    j["timesteps"] = 4;
    j["cond_dim"] = 8;
    j["cond_hidden"] = 8;
    j["freq_count"] = 1;
    j["ddim_steps"] = 2;
    j["stage1_steps"] = 3;
    j["stage2_steps"] = 2;
    j["fit_gaussians"] = 16;
    j["fit_iters"] = 40;
    j["truncation_sigma"] = 4.0;
    j["turntable_frames"] = 3;
    j["seed"] = 7;
    j["dataset_dir"] = root + "/data";
    j["checkpoint"] = root + "/model.ckpt";
    j["out_dir"] = root + "/out";
    return j;
}

mvtk_status call(mvtk_status (*fn)(const char*, char*, size_t), const json& cfg,
                 std::string* summary = nullptr) {
    char buf[512];
    mvtk_status st = fn(cfg.dump().c_str(), buf, sizeof buf);
    if (summary != nullptr) *summary = buf;
    return st;
}

}  // namespace

TEST_CASE("introspection strings are stable and well formed") {
    CHECK(std::strlen(mvtk_version()) > 0);
    CHECK(mvtk_config_schema_json() == mvtk_config_schema_json());

    json schema = json::parse(mvtk_config_schema_json());
    REQUIRE(schema.is_array());
    CHECK(schema.size() > 0);

    std::string help = mvtk_config_help();
    for (const json& f : schema)
        CHECK(help.find(f["key"].get<std::string>()) != std::string::npos);
}

TEST_CASE("config failures report through status and last_error") {
    CHECK(mvtk_synth(nullptr, nullptr, 0) == MVTK_ERR_CONFIG);
    CHECK(std::strlen(mvtk_last_error()) > 0);

    CHECK(mvtk_synth("not json", nullptr, 0) == MVTK_ERR_CONFIG);
    CHECK(mvtk_synth("{\"no_such_key\": 1}", nullptr, 0) == MVTK_ERR_CONFIG);
    CHECK(mvtk_synth("{\"subjects\": 0}", nullptr, 0) == MVTK_ERR_CONFIG);
    CHECK(mvtk_train("{\"view_count\": 7}", nullptr, 0) == MVTK_ERR_CONFIG);

    // summary is cleared on failure, never stale
    char buf[16];
    std::memcpy(buf, "leftover", 9);
    CHECK(mvtk_synth("not json", buf, sizeof buf) == MVTK_ERR_CONFIG);
    CHECK(buf[0] == '\0');
}

TEST_CASE("missing artifacts are runtime errors") {
    std::string root = mvtk_test::temp_dir("capi_missing");
    json cfg = chain_config(root);
    CHECK(call(&mvtk_train, cfg) == MVTK_ERR_RUNTIME);  // no dataset yet
    CHECK(std::strlen(mvtk_last_error()) > 0);
    CHECK(call(&mvtk_eval, cfg) == MVTK_ERR_RUNTIME);  // no clouds yet
}

TEST_CASE("full stage chain through the C interface") {
    std::string root = mvtk_test::temp_dir("capi_chain");
    json cfg = chain_config(root);

    std::string summary;
    REQUIRE(call(&mvtk_synth, cfg, &summary) == MVTK_OK);
    CHECK(summary.find("2 subjects") != std::string::npos);
    CHECK(std::strlen(mvtk_last_error()) == 0);

    REQUIRE(call(&mvtk_train, cfg, &summary) == MVTK_OK);
    CHECK(fs::exists(root + "/model.ckpt"));
    CHECK(fs::exists(root + "/out/train_trace.txt"));

    REQUIRE(call(&mvtk_edit, cfg, &summary) == MVTK_OK);
    CHECK(fs::exists(root + "/out/edit/view_000.pfm"));
    CHECK(fs::exists(root + "/out/edit/view_003.ppm"));

    REQUIRE(call(&mvtk_reconstruct, cfg, &summary) == MVTK_OK);
    CHECK(fs::exists(root + "/out/recon/cloud_src.gspl"));
    CHECK(fs::exists(root + "/out/recon/cloud_vton.gspl"));

    REQUIRE(call(&mvtk_eval, cfg, &summary) == MVTK_OK);
    std::ifstream in(root + "/out/report.json");
    REQUIRE(in.good());
    json report = json::parse(in);
    CHECK(std::isfinite(report.at("clip_cons").get<double>()));
    CHECK(std::isfinite(report.at("dino_sim").get<double>()));
    CHECK(report.at("kept").size() >= 2);
    CHECK(report.at("config").at("seed") == 7);

    REQUIRE(call(&mvtk_turntable, cfg, &summary) == MVTK_OK);
    CHECK(fs::exists(root + "/out/turntable/frame_000.ppm"));
    CHECK(fs::exists(root + "/out/turntable/frame_002.ppm"));
    CHECK_FALSE(fs::exists(root + "/out/turntable/frame_003.ppm"));

    SUBCASE("model handle reports checkpoint facts") {
        mvtk_model* model = nullptr;
        std::string ckpt = root + "/model.ckpt";
        REQUIRE(mvtk_model_load(ckpt.c_str(), &model) == MVTK_OK);
        REQUIRE(model != nullptr);
        json info = json::parse(mvtk_model_info_json(model));
        CHECK(info.at("blocks") == 1);
        CHECK(info.at("timesteps") == 4);
        CHECK(info.at("optimizer_step") == 5);  // 3 + 2 training steps
        CHECK(info.at("parameter_count").get<long long>() > 0);
        CHECK(info.at("tensor_count") == 22);  // 12 shared + 10 per block
        mvtk_model_free(model);
    }

    SUBCASE("summary truncation stays NUL terminated") {
        char tiny[8];
        REQUIRE(mvtk_eval(cfg.dump().c_str(), tiny, sizeof tiny) == MVTK_OK);
        CHECK(std::strlen(tiny) == 7);
    }
}

TEST_CASE("model loading failure paths") {
    mvtk_model* model = reinterpret_cast<mvtk_model*>(0x1);
    CHECK(mvtk_model_load("/no/such/file.ckpt", &model) == MVTK_ERR_RUNTIME);
    CHECK(model == nullptr);
    CHECK(std::strlen(mvtk_last_error()) > 0);

    CHECK(mvtk_model_load(nullptr, &model) == MVTK_ERR_RUNTIME);
    CHECK(mvtk_model_load("/no/such/file.ckpt", nullptr) == MVTK_ERR_RUNTIME);

    mvtk_model_free(nullptr);  // must be a no-op
    CHECK(std::string(mvtk_model_info_json(nullptr)).empty());
}
