#include <stdio.h>
#include <stdlib.h>
#include "cotrain.h"

int main(void) {
  size_t dims[3] = {8, 16, 16};
  size_t n = dims[0] * dims[1] * dims[2];
  float *image = malloc(n * sizeof(float));
  uint8_t *gt = malloc(n);
  uint8_t *pred = malloc(n);
  CotrainModel *model = NULL;
  CotrainOutput *out = NULL;
  CotrainLabels *labels = NULL;
  double d = 0.0;

  if (cotrain_generate_phantom(7, dims, image, gt) != COTRAIN_STATUS_OK) return 1;
  if (cotrain_model_new("bogus", 0, 0, 0, &model) != COTRAIN_STATUS_CONFIG) return 2;
  if (cotrain_last_error() == NULL) return 3;
  if (cotrain_model_new("mix_reco", 4, 2, 0, &model) != COTRAIN_STATUS_OK) return 4;
  if (cotrain_model_predict(model, image, dims, NULL, 1, &out) != COTRAIN_STATUS_OK) return 5;
  if (cotrain_postprocess(out, &labels) != COTRAIN_STATUS_OK) return 6;
  if (cotrain_labels_copy(labels, pred, n) != COTRAIN_STATUS_OK) return 7;
  if (cotrain_dsc(gt, gt, dims, 1, &d) != COTRAIN_STATUS_OK || d != 1.0) return 8;
  printf("cotrain %s ok\n", cotrain_version());
  cotrain_labels_free(labels);
  cotrain_output_free(out);
  cotrain_model_free(model);
  free(image);
  free(gt);
  free(pred);
  return 0;
}
