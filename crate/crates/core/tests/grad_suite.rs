use comma_core::grad_suite::{block_checks, primitive_checks};

#[test]
fn every_primitive_passes_over_twenty_seeds() {
    for o in primitive_checks(20).unwrap() {
        println!("{:<18} worst {:.3e}", o.name, o.worst);
        assert!(o.passed(), "{o:?}");
    }
}

#[test]
fn every_block_passes_over_twenty_seeds() {
    for o in block_checks(20).unwrap() {
        println!("{:<18} worst {:.3e}", o.name, o.worst);
        assert!(o.passed(), "{o:?}");
    }
}
