/* Copyright 2026 The vlmdiff Authors
 * SPDX-License-Identifier: Apache-2.0 */

/* Exercises the shared library through its C interface only. */

#define _GNU_SOURCE
#include <math.h>
#include <stdio.h>
#include <stdlib.h>
#include <string.h>
#include <unistd.h>

#include "vlmdiff/vlmdiff.h"

static int failures = 0;

#define EXPECT(cond)                                                      \
  do {                                                                    \
    if (!(cond)) {                                                        \
      fprintf(stderr, "%s:%d: expected %s\n", __FILE__, __LINE__, #cond); \
      ++failures;                                                         \
    }                                                                     \
  } while (0)

static void count_lines(const char* line, void* user) {
  (void)line;
  ++*(int*)user;
}

static void test_metrics(void) {
  const double scores[] = {0.1, 0.4, 0.35, 0.8};
  const uint8_t labels[] = {0, 0, 1, 1};
  double v = -1;
  EXPECT(vlmdiff_auroc(scores, labels, 4, &v) == VLMDIFF_OK);
  EXPECT(v == 0.75);
  EXPECT(strlen(vlmdiff_last_error()) == 0);

  const uint8_t one_class[] = {1, 1, 1, 1};
  EXPECT(vlmdiff_auroc(scores, one_class, 4, &v) == VLMDIFF_ERR_USER);
  EXPECT(strlen(vlmdiff_last_error()) > 0);
  EXPECT(vlmdiff_auroc(NULL, labels, 4, &v) == VLMDIFF_ERR_USER);

  const float maps[] = {0, 1, 1, 0, 0, 0, 0, 0, 1};
  const uint8_t masks[] = {0, 1, 1, 0, 0, 0, 0, 0, 1};
  EXPECT(vlmdiff_pro(maps, masks, 1, 3, 3, 0.3, 0, &v) == VLMDIFF_OK);
  EXPECT(fabs(v - 1.0) < 1e-12);
  EXPECT(vlmdiff_pro(maps, masks, 1, 3, 3, 0.0, 0, &v) == VLMDIFF_ERR_USER);
}

static void test_anomaly_map(void) {
  const float f[] = {1, 0, 1, 1, 1, 0, 0, 0};
  const float g[] = {0, 1, 1, 0, -2, 0, 0, 0};
  float out[4];
  float score = -1;
  EXPECT(vlmdiff_anomaly_map(f, g, 2, 2, 2, 2, 2, 0.0, out, &score) == VLMDIFF_OK);
  EXPECT(fabsf(out[0] - 1.0f) < 1e-6f);
  EXPECT(fabsf(out[1] - (1.0f - 1.0f / sqrtf(2.0f))) < 1e-6f);
  EXPECT(fabsf(out[2] - 2.0f) < 1e-6f);
  EXPECT(out[3] == 0.0f);
  EXPECT(fabsf(score - 2.0f) < 1e-6f);
  EXPECT(vlmdiff_anomaly_map(f, f, 2, 2, 2, 8, 8, 1.0, NULL, &score) == VLMDIFF_ERR_USER);
}

static void test_run(void) {
  char dir[] = "/tmp/vlmdiff-capi-XXXXXX";
  EXPECT(mkdtemp(dir) != NULL);
  char out_dir[256];
  snprintf(out_dir, sizeof out_dir, "output_dir=%s/run", dir);
  const char* overrides[] = {out_dir,
                             "dataset.resolution=32",
                             "dataset.synth.n_train=4",
                             "dataset.synth.n_test_normal=2",
                             "dataset.synth.n_test_anomalous=2",
                             "encoder.dim=8",
                             "encoder.slots=4",
                             "ae.factor=4",
                             "ae.base_channels=8",
                             "ae.epochs=1",
                             "ae.batch=4",
                             "diff.T=20",
                             "diff.steps=2",
                             "diff.batch=4",
                             "diff.train_steps=2",
                             "diff.unet.base_channels=8",
                             "diff.unet.channel_mult=[1,2]",
                             "diff.unet.heads=2",
                             "segmentation.extractor.patch=4",
                             "segmentation.extractor.channels=8"};
  const size_t n = sizeof overrides / sizeof overrides[0];

  vlmdiff_run* run = NULL;
  const char* bad[] = {"diff.bogus=1"};
  EXPECT(vlmdiff_run_open(NULL, bad, 1, &run) == VLMDIFF_ERR_USER);
  EXPECT(run == NULL);
  EXPECT(strstr(vlmdiff_last_error(), "diff.bogus") != NULL);
  EXPECT(vlmdiff_run_open("/nonexistent/config.json", NULL, 0, &run) != VLMDIFF_OK);

  EXPECT(vlmdiff_run_open(NULL, overrides, n, &run) == VLMDIFF_OK);
  if (run == NULL) return;
  int lines = 0;
  vlmdiff_run_set_message_callback(run, count_lines, &lines);

  size_t needed = 0;
  EXPECT(vlmdiff_run_report_text(run, NULL, 0, &needed) == VLMDIFF_ERR_MISSING_ARTIFACT);
  EXPECT(vlmdiff_run_stage(run, "eval") == VLMDIFF_ERR_MISSING_ARTIFACT);
  EXPECT(strstr(vlmdiff_last_error(), "run synth") != NULL);
  EXPECT(vlmdiff_run_stage(run, "bogus") == VLMDIFF_ERR_USER);

  EXPECT(vlmdiff_run_stage(run, "all") == VLMDIFF_OK);
  EXPECT(lines > 0);

  EXPECT(vlmdiff_run_report_text(run, NULL, 0, &needed) == VLMDIFF_OK);
  EXPECT(needed > 0);
  char* report = malloc(needed + 1);
  size_t again = 0;
  EXPECT(vlmdiff_run_report_text(run, report, needed + 1, &again) == VLMDIFF_OK);
  EXPECT(again == needed);
  EXPECT(strlen(report) == needed);
  EXPECT(strstr(report, "roc_p = ") != NULL);
  char small[8];
  EXPECT(vlmdiff_run_report_text(run, small, sizeof small, &again) == VLMDIFF_OK);
  EXPECT(strlen(small) == sizeof small - 1);
  free(report);

  char buf[4096];
  EXPECT(vlmdiff_run_config_json(run, buf, sizeof buf, &needed) == VLMDIFF_OK);
  EXPECT(strstr(buf, "\"train_steps\"") != NULL);
  EXPECT(vlmdiff_run_output_dir(run, buf, sizeof buf, &needed) == VLMDIFF_OK);
  EXPECT(strstr(buf, dir) == buf);

  vlmdiff_run_close(run);
  vlmdiff_run_close(NULL);

  char cmd[300];
  snprintf(cmd, sizeof cmd, "rm -rf '%s'", dir);
  EXPECT(system(cmd) == 0);
}

int main(void) {
  EXPECT(strcmp(vlmdiff_version(), "0.1.0") == 0);
  EXPECT(strcmp(vlmdiff_status_name(VLMDIFF_ERR_MISSING_ARTIFACT), "missing artifact") == 0);
  test_metrics();
  test_anomaly_map();
  test_run();
  if (failures) {
    fprintf(stderr, "%d check(s) failed\n", failures);
    return 1;
  }
  printf("c api: all checks passed\n");
  return 0;
}
