//! Declarative parameter blocks.
//!
//! Models keep their trainable tensors in plain structs; training binds
//! each tensor onto a tape as a leaf and the optimizer walks them in
//! declaration order. The macro generates the struct, its tape-bound
//! mirror, and the enumeration methods from a single field list so the
//! three can never drift apart. Enumeration order is declaration order,
//! which makes optimizer state and serialized manifests stable.

/// Declares a tensor-holding struct and its tape-bound mirror.
macro_rules! param_block {
    ($(#[$meta:meta])* pub struct $Name:ident / $Bound:ident { $($field:ident),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $Name {
            $(pub $field: $crate::tensor::Tensor,)+
        }

        /// Tape-bound mirror of the parameter block.
        pub struct $Bound {
            $(pub $field: $crate::tape::Var,)+
        }

        impl $Name {
            /// Visit every tensor with its field name, in declaration order.
            pub fn visit<'a>(&'a self, f: &mut dyn FnMut(&'static str, &'a $crate::tensor::Tensor)) {
                $(f(stringify!($field), &self.$field);)+
            }

            /// Mutable variant of [`Self::visit`], same order.
            pub fn visit_mut(&mut self, f: &mut dyn FnMut(&'static str, &mut $crate::tensor::Tensor)) {
                $(f(stringify!($field), &mut self.$field);)+
            }

            /// Put every tensor on the tape; trainable leaves participate
            /// in backward, frozen ones are constants (inference).
            pub fn bind(&self, tape: &$crate::tape::Tape, trainable: bool) -> $Bound {
                $Bound {
                    $($field: if trainable {
                        tape.param(self.$field.clone())
                    } else {
                        tape.constant(self.$field.clone())
                    },)+
                }
            }
        }

        impl $Bound {
            /// Bound vars in the same order as `visit`.
            pub fn vars(&self, out: &mut Vec<$crate::tape::Var>) {
                $(out.push(self.$field.clone());)+
            }
        }
    };
}

pub(crate) use param_block;
