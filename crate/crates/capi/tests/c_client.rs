//! Compile and run a small C client against the generated header and the
//! static library, exercising the ABI the way a host language would.

use std::path::PathBuf;
use std::process::Command;

const C_SOURCE: &str = r#"
#include <stdio.h>
#include <math.h>
#include "exomix.h"

int main(void) {
    ExomixDataset *dataset = NULL;
    if (exomix_dataset_simulate_mixture(7, 500, 0.6, 2.0, &dataset) != EXOMIX_STATUS_OK) {
        return 1;
    }
    if (exomix_dataset_rows(dataset) != 500 || exomix_dataset_cols(dataset) != 3) {
        return 2;
    }

    ExomixFitOptions options;
    exomix_fit_options_default(&options);
    options.restarts = 1;
    options.tolerance = 1e-4;
    options.density_grid = 256;
    options.seed = 7;

    ExomixFit *fit = NULL;
    if (exomix_fit(dataset, 2, &options, &fit) != EXOMIX_STATUS_OK) {
        char message[256];
        exomix_last_error_message(message, sizeof message);
        fprintf(stderr, "fit failed: %s\n", message);
        return 3;
    }

    double weights[2];
    if (exomix_fit_weights(fit, weights) != EXOMIX_STATUS_OK) {
        return 4;
    }
    if (fabs(weights[0] + weights[1] - 1.0) > 1e-9 || weights[0] > weights[1]) {
        return 5;
    }

    ExomixPipelineResult result;
    if (exomix_pipeline_two_component(dataset, &options, 0, 0.5, 0, &result)
        != EXOMIX_STATUS_OK) {
        return 6;
    }
    if (result.n_selected == 0 || !(result.slope > 0.5 && result.slope < 3.5)) {
        return 7;
    }

    printf("weights %.3f/%.3f slope %.3f n %zu\n",
           weights[0], weights[1], result.slope, result.n_selected);
    exomix_fit_free(fit);
    exomix_dataset_free(dataset);
    return 0;
}
"#;

#[test]
fn c_client_builds_and_runs() {
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let include_dir = manifest.join("include");

    // The static library lands next to this test binary's deps directory.
    let mut lib_dir = std::env::current_exe().unwrap();
    lib_dir.pop(); // test binary
    lib_dir.pop(); // deps/
    let lib = lib_dir.join("libexomix_capi.a");
    assert!(
        lib.exists(),
        "static library not found at {}",
        lib.display()
    );

    let work = tempfile_dir();
    let source = work.join("client.c");
    std::fs::write(&source, C_SOURCE).unwrap();
    let binary = work.join("client");

    let compile = Command::new("cc")
        .arg("-Wall")
        .arg("-I")
        .arg(&include_dir)
        .arg(&source)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm"])
        .arg("-o")
        .arg(&binary)
        .output()
        .expect("invoke cc");
    assert!(
        compile.status.success(),
        "cc failed: {}",
        String::from_utf8_lossy(&compile.stderr)
    );

    let run = Command::new(&binary).output().expect("run client");
    assert!(
        run.status.success(),
        "client exited with {:?}: {}",
        run.status.code(),
        String::from_utf8_lossy(&run.stderr)
    );
    let stdout = String::from_utf8_lossy(&run.stdout);
    assert!(stdout.contains("slope"), "unexpected output: {stdout}");
}

fn tempfile_dir() -> PathBuf {
    let dir = std::env::temp_dir().join(format!("exomix-c-client-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}
