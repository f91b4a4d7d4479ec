#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>

#include "r3p/config.hpp"
#include "support.hpp"

using namespace r3p;
using r3p::testing::TempDir;

namespace {

std::filesystem::path write_file(const TempDir& dir, const std::string& name,
                                 const std::string& text) {
  const auto path = dir / name;
  std::ofstream(path) << text;
  return path;
}

// Sets an environment variable for the lifetime of the object.
class ScopedEnv {
 public:
  ScopedEnv(const char* name, const char* value) : name_(name) {
    if (const char* old = std::getenv(name)) old_ = old;
    ::setenv(name, value, 1);
  }
  ~ScopedEnv() {
    if (old_) ::setenv(name_, old_->c_str(), 1);
    else ::unsetenv(name_);
  }

 private:
  const char* name_;
  std::optional<std::string> old_;
};

}  // namespace

TEST(Config, DefaultsAreValid) {
  PipelineConfig c;
  EXPECT_NO_THROW(validate(c));
  EXPECT_EQ(c.r3.gamma, 0.45);
  EXPECT_EQ(c.r3.alpha, 0.15);
  EXPECT_EQ(c.r3.beta, 0.50);
  EXPECT_EQ(c.r3.lambda_dist, 100);
}

TEST(Config, FileSetsSectionedKeys) {
  TempDir dir;
  const auto path = write_file(dir, "run.toml", R"(# comment
[data]
classes = 3
per_class = 9
image_size = 16

[model]
widths = [4, 8]
prototypes_per_class = 2

[train]
epochs = 4
lr_head = 0.01

[r3]
alpha = 0.2

[output]
root = "somewhere"
)");
  PipelineConfig c;
  load_config_file(c, path);
  EXPECT_EQ(c.synthetic.classes, 3);
  EXPECT_EQ(c.synthetic.per_class, 9);
  EXPECT_EQ(c.model.image_size, 16);
  EXPECT_EQ(c.reward.image_size, 16);
  EXPECT_EQ(c.model.classes, 3);
  EXPECT_EQ(c.model.widths, (std::vector<int>{4, 8}));
  EXPECT_EQ(c.model.prototypes_per_class, 2);
  EXPECT_EQ(c.train.epochs, 4);
  EXPECT_EQ(c.train.lr_head, 0.01);
  EXPECT_EQ(c.retrain.epochs, PipelineConfig{}.retrain.epochs);
  EXPECT_EQ(c.r3.alpha, 0.2);
  EXPECT_EQ(c.output_root, "somewhere");
}

TEST(Config, UnknownKeyIsRejected) {
  TempDir dir;
  PipelineConfig c;
  EXPECT_THROW(load_config_file(c, write_file(dir, "a.toml", "[train]\nepochz = 3\n")), ConfigError);
  EXPECT_THROW(set_key(c, "model.nope", {"1"}), ConfigError);
  try {
    load_config_file(c, write_file(dir, "b.toml", "[r3]\nbogus = 1\n"));
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("r3.bogus"), std::string::npos) << e.what();
  }
}

TEST(Config, BadValuesAreRejected) {
  PipelineConfig c;
  EXPECT_THROW(set_key(c, "train.epochs", {"three"}), ConfigError);
  EXPECT_THROW(set_key(c, "model.widths", {""}), ConfigError);
  EXPECT_THROW(set_key(c, "r3.gamma", {"0.1", "0.2"}), ConfigError);
  EXPECT_THROW(load_config_file(c, "/nonexistent/run.toml"), ConfigError);
}

TEST(Config, ListsAcceptCommaAndRepeatedForms) {
  PipelineConfig c;
  set_key(c, "model.widths", {"8,16,32"});
  EXPECT_EQ(c.model.widths, (std::vector<int>{8, 16, 32}));
  set_key(c, "reward.widths", {"2", "4"});
  EXPECT_EQ(c.reward.widths, (std::vector<int>{2, 4}));
}

TEST(Config, InconsistentThresholdsFailValidation) {
  PipelineConfig c;
  set_key(c, "r3.alpha", {"0.6"});
  EXPECT_THROW(validate(c), ConfigError);
  c = PipelineConfig{};
  set_key(c, "feedback.test_fraction", {"1.0"});
  EXPECT_THROW(validate(c), ConfigError);
}

TEST(Config, EnvironmentOverridesFileOutputRoot) {
  TempDir dir;
  PipelineConfig c;
  load_config_file(c, write_file(dir, "o.toml", "[output]\nroot = \"from-file\"\n"));
  {
    ScopedEnv env(kOutputRootEnv, "from-env");
    apply_output_env(c);
    EXPECT_EQ(c.output_root, "from-env");
  }
  PipelineConfig d;
  load_config_file(d, dir / "o.toml");
  {
    ScopedEnv env(kOutputRootEnv, "");
    apply_output_env(d);
    EXPECT_EQ(d.output_root, "from-file");
  }
}
