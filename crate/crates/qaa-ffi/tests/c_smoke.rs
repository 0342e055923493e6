//! Compiles and runs a small C program against the generated header and the
//! static library, exercising the ABI the way a foreign binding would.

use std::path::PathBuf;
use std::process::Command;

const C_PROGRAM: &str = r#"
#include <stdio.h>
#include <stdlib.h>
#include "qaa.h"

int main(void) {
    QaaDataset *ds = NULL;
    if (qaa_dataset_synth(3, 64, 8, 8, 0.1f, 7, &ds) != QAA_STATUS_OK) {
        fprintf(stderr, "synth failed: %s\n", qaa_last_error_message());
        return 1;
    }
    if (qaa_dataset_len(ds) != 64) return 2;

    QaaModel *model = NULL;
    if (qaa_train_standard("mlp-3", ds, 1, 32, 0.01f, 1, &model) != QAA_STATUS_OK) {
        fprintf(stderr, "train failed: %s\n", qaa_last_error_message());
        return 3;
    }
    double acc = 0.0;
    if (qaa_model_accuracy(model, ds, QAA_STATE_NATURAL, &acc) != QAA_STATUS_OK) return 4;

    QaaAdvSet *adv = NULL;
    if (qaa_attack_run(model, ds, QAA_ATTACK_FAMILY_PGD, 0.05f, 2, 3,
                       QAA_STATE_NATURAL, 8, &adv) != QAA_STATUS_OK) {
        fprintf(stderr, "attack failed: %s\n", qaa_last_error_message());
        return 5;
    }
    double asr = -2.0;
    size_t clean_correct = 0;
    if (qaa_evaluate_asr(adv, model, QAA_STATE_NATURAL, &asr, &clean_correct) != QAA_STATUS_OK)
        return 6;
    if (asr < -1.0 || asr > 100.0) return 7;

    char *arch = qaa_model_arch_id(model);
    printf("arch=%s version=%s acc=%.3f asr=%.1f\n", arch, qaa_version(), acc, asr);
    qaa_string_free(arch);
    qaa_advset_free(adv);
    qaa_model_free(model);
    qaa_dataset_free(ds);
    return 0;
}
"#;

#[test]
fn c_program_links_and_runs() {
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let include_dir = manifest.join("include");
    // the staticlib lands next to the test binary's profile directory
    let mut lib_dir = PathBuf::from(std::env::current_exe().unwrap());
    lib_dir.pop(); // test binary
    lib_dir.pop(); // deps/
    let lib = lib_dir.join("libqaa_ffi.a");
    assert!(lib.exists(), "staticlib not found at {}", lib.display());

    let work = std::env::temp_dir().join(format!("qaa_c_smoke_{}", std::process::id()));
    std::fs::create_dir_all(&work).unwrap();
    let src = work.join("smoke.c");
    std::fs::write(&src, C_PROGRAM).unwrap();
    let bin = work.join("smoke");

    let compile = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(&include_dir)
        .arg(&lib)
        .arg("-lpthread")
        .arg("-ldl")
        .arg("-lm")
        .arg("-o")
        .arg(&bin)
        .output()
        .expect("cc is available");
    assert!(
        compile.status.success(),
        "compilation failed:\n{}",
        String::from_utf8_lossy(&compile.stderr)
    );

    let run = Command::new(&bin).output().expect("smoke binary runs");
    assert!(
        run.status.success(),
        "smoke binary exited {:?}: {}",
        run.status.code(),
        String::from_utf8_lossy(&run.stderr)
    );
    let stdout = String::from_utf8_lossy(&run.stdout);
    assert!(stdout.contains("arch=mlp-3"), "unexpected output: {stdout}");
    let _ = std::fs::remove_dir_all(&work);
}
