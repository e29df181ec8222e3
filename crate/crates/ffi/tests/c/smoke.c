#include <stdio.h>
#include <string.h>
#include "corm.h"

int main(void) {
    CormModel *model = NULL;
    if (corm_model_new_toy(7, &model) != CORM_STATUS_OK) return 1;
    size_t vocab = corm_model_vocab_size(model);
    double logits[256];
    CormDecoder *dec = NULL;
    if (corm_decoder_new(model, "corm:4+4", CORM_THRESHOLD_STEP, &dec) != CORM_STATUS_OK) return 2;
    corm_model_free(model);
    for (uint32_t t = 0; t < 48; t++) {
        if (corm_decoder_step(dec, (t * 37) % 256, logits, vocab) != CORM_STATUS_OK) return 3;
    }
    size_t size = 0;
    if (corm_decoder_cache_size(dec, 1, 2, &size) != CORM_STATUS_OK) return 4;
    double rate = -1.0;
    corm_decoder_compression_rate(dec, &rate);
    if (corm_policy_validate("lru:3") != CORM_STATUS_INVALID_POLICY) return 5;
    if (strstr(corm_last_error_message(), "unknown policy") == NULL) return 6;
    printf("steps=%zu size=%zu rate=%.4f\n", corm_decoder_step_count(dec), size, rate);
    corm_decoder_free(dec);
    return 0;
}
