#include <stdio.h>
#include <string.h>
#include "robust_mmr.h"

#define CHECK(expr)                                                    \
    do {                                                               \
        RmmrStatus s_ = (expr);                                        \
        if (s_ != RMMR_STATUS_OK) {                                    \
            char msg[256];                                             \
            rmmr_last_error(msg, sizeof msg);                          \
            fprintf(stderr, "%s -> %d: %s\n", #expr, (int)s_, msg);    \
            return 1;                                                  \
        }                                                              \
    } while (0)

int main(int argc, char **argv) {
    const char *dir = argc > 1 ? argv[1] : ".";
    char path[1024];
    RmmrConfig *cfg = NULL;
    const char *json =
        "{\"seed\": 3, \"corpus\": {\"samples_per_class_per_domain\": 2}, "
        "\"train\": {\"total_steps\": 2, \"batch_size\": 4}}";
    CHECK(rmmr_config_from_json(json, &cfg));

    RmmrCorpus *corpus = NULL;
    CHECK(rmmr_corpus_generate(cfg, &corpus));
    if (rmmr_corpus_len(corpus) != 8) return 2;

    RmmrCheckpoint *ckpt = NULL;
    CHECK(rmmr_train(cfg, corpus, &ckpt));
    if (rmmr_checkpoint_step(ckpt) != 2) return 3;

    snprintf(path, sizeof path, "%s/c_ckpt.json", dir);
    CHECK(rmmr_checkpoint_save(ckpt, path));
    RmmrCheckpoint *loaded = NULL;
    CHECK(rmmr_checkpoint_load(path, &loaded));

    size_t d = rmmr_checkpoint_embed_dim(loaded);
    double buf[8 * 64];
    size_t len = 0;
    CHECK(rmmr_embed(loaded, corpus, 0.0, buf, sizeof buf / sizeof buf[0], &len));
    if (len != 8 * d) return 4;

    if (rmmr_embed(loaded, corpus, 0.0, buf, 1, &len) != RMMR_STATUS_BUFFER_TOO_SMALL) return 5;
    if (rmmr_config_from_json("{\"bogus\": 1}", &cfg) != RMMR_STATUS_INVALID_ARGUMENT) return 6;
    char msg[256];
    rmmr_last_error(msg, sizeof msg);
    if (strstr(msg, "bogus") == NULL) return 7;

    double lr = -1.0;
    CHECK(rmmr_lr_at(50, 500, 0.1, 1.0, &lr));
    if (lr != 1.0) return 8;

    printf("ok %s dim %zu drop %.1f\n", rmmr_version(), d, rmmr_domain_drop(83.3, 78.9));
    rmmr_checkpoint_free(loaded);
    rmmr_checkpoint_free(ckpt);
    rmmr_corpus_free(corpus);
    rmmr_config_free(cfg);
    return 0;
}
