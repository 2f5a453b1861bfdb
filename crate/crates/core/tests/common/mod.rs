#![allow(dead_code)]

pub mod dmrn_check;
pub mod gradcheck;
