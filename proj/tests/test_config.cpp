#include "doctest.h"
#include "support.hpp"

#include "promptpar/config.hpp"
#include "promptpar/errors.hpp"

#include "json.hpp"

#include <cstdlib>
#include <fstream>

using namespace promptpar;

TEST_CASE("defaults") {
  const Config c;
  CHECK(c.get_int("train.epochs") == 40);
  CHECK(c.get_double("train.lr_head") == 8e-3);
  CHECK(c.get_double("train.lr_prompt") == 4e-3);
  CHECK(c.get_double("train.momentum") == 0.9);
  CHECK(c.get_int("train.warmup_epochs") == 5);
  CHECK(c.get_double("train.warmup_start_ratio") == 0.01);
  CHECK(c.get_double("train.weight_decay") == 1e-4);
  CHECK(c.get_int("train.batch_size") == 16);
  CHECK(c.get_double("train.alpha") == 0.5);
  CHECK(c.get_int("prompt.visual_global") == 50);
  CHECK(c.get_int("prompt.textual") == 3);
  CHECK(c.get_int("regions.K") == 4);
  CHECK(c.get_double("fusion.temperature") == 0.07);
  CHECK(c.entries().at("train.epochs").source == "default");

  const auto mc = model_config_from(c);
  CHECK(mc.prompt.depth == mc.encoder.visual_layers);
  CHECK(mc.prompt.mode == PromptMode::kDeep);
  const auto tc = train_config_from(c);
  CHECK(tc.batch_size == 16);
  CHECK(tc.grad_clip == 10.0);
}

TEST_CASE("layering: file < env < flag") {
  testing::ScratchDir dir("config_layers");
  std::ofstream(dir.str("run.conf")) << "# comment\n[train]\nepochs = 12\nbatch_size = 8\nlr_head = 1e-3\n"
                                     << "[prompt]\ntextual = 5  # trailing\n";
  Config c;
  c.load_file(dir.str("run.conf"));
  CHECK(c.get_int("train.epochs") == 12);
  CHECK(c.get_int("prompt.textual") == 5);
  CHECK(c.entries().at("train.epochs").source == "file:" + dir.str("run.conf"));

  CHECK(Config::env_name("train.batch_size") == "PROMPTPAR_TRAIN_BATCH_SIZE");
  ::setenv("PROMPTPAR_TRAIN_BATCH_SIZE", "4", 1);
  ::setenv("PROMPTPAR_TRAIN_EPOCHS", "20", 1);
  c.apply_env();
  ::unsetenv("PROMPTPAR_TRAIN_BATCH_SIZE");
  ::unsetenv("PROMPTPAR_TRAIN_EPOCHS");
  CHECK(c.get_int("train.batch_size") == 4);
  CHECK(c.entries().at("train.batch_size").source == "env:PROMPTPAR_TRAIN_BATCH_SIZE");

  c.set_assignment("train.epochs=30");
  CHECK(c.get_int("train.epochs") == 30);
  CHECK(c.entries().at("train.epochs").source == "flag");
  CHECK(c.get_double("train.lr_head") == 1e-3);
}

TEST_CASE("errors") {
  Config c;
  CHECK_THROWS_AS(c.set("train.epoch", "3"), ConfigError);
  CHECK_THROWS_AS(c.load_text("[train]\nbogus = 1\n", "text"), ConfigError);
  CHECK_THROWS_AS(c.load_text("no equals sign\n", "text"), ConfigError);
  CHECK_THROWS_AS(c.set_assignment("train.epochs"), ConfigError);
  CHECK_THROWS_AS(c.load_file("/definitely/not/here.conf"), ConfigError);

  c.set("train.epochs", "ten");
  CHECK_THROWS_AS(c.get_int("train.epochs"), ConfigError);
  c.set("augment.enabled", "maybe");
  CHECK_THROWS_AS(c.get_bool("augment.enabled"), ConfigError);
  for (const char* yes : {"true", "1", "yes", "ON"}) {
    c.set("augment.enabled", yes);
    CHECK(c.get_bool("augment.enabled"));
  }
  for (const char* no : {"false", "0", "no", "Off"}) {
    c.set("augment.enabled", no);
    CHECK_FALSE(c.get_bool("augment.enabled"));
  }
}

TEST_CASE("validation") {
  auto rejects = [](const char* assignment) {
    Config c;
    c.set_assignment(assignment);
    bool threw = false;
    try {
      model_config_from(c);
      train_config_from(c);
    } catch (const ConfigError&) {
      threw = true;
    }
    return threw;
  };
  CHECK(rejects("train.warmup_epochs=40"));
  CHECK(rejects("train.lr_head=0"));
  CHECK(rejects("train.lr_prompt=-1"));
  CHECK(rejects("train.batch_size=0"));
  CHECK(rejects("train.alpha=-0.5"));
  CHECK(rejects("prompt.mode=wide"));
  CHECK(rejects("prompt.depth=9"));
  CHECK(rejects("regions.K=5"));
  CHECK(rejects("fusion=transformer"));
  CHECK(rejects("fusion.temperature=0"));
  CHECK(rejects("stub.visual_heads=5"));
  CHECK(rejects("backbone.id=resnet"));
  CHECK_FALSE(rejects("regions.K=1"));
  CHECK_FALSE(rejects("train.alpha=0"));

  Config shallow;
  shallow.set("prompt.mode", "shallow");
  CHECK(model_config_from(shallow).prompt.depth == 1);
  shallow.set("prompt.depth", "2");
  CHECK_THROWS_AS(model_config_from(shallow), ConfigError);
}

TEST_CASE("resolved output records every consumed key") {
  Config c;
  c.set("train.epochs", "3");
  c.set("train.warmup_epochs", "1");
  model_config_from(c);
  train_config_from(c);
  CHECK(c.consumed().count("train.epochs"));
  CHECK(c.consumed().count("prompt.visual_global"));
  CHECK_FALSE(c.consumed().count("backbone.bundle"));

  const auto j = nlohmann::json::parse(c.resolved_json());
  for (const auto& key : c.consumed()) {
    REQUIRE(j.contains(key));
    CHECK(j[key]["consumed"] == true);
    CHECK(j[key]["value"] == c.entries().at(key).value);
  }
  CHECK(j["train.epochs"]["source"] == "flag");
  CHECK(c.resolved_text().find("train.epochs = 3\n") != std::string::npos);

  Config back;
  back.load_text(c.resolved_text(), "resolved");
  for (const auto& [key, e] : c.entries()) CHECK(back.entries().at(key).value == e.value);
}
